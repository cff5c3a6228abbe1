#include <cstdio>

int main() {
  std::puts("sqvlm: placeholder");
  return 0;
}
