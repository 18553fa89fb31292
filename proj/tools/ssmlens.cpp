#include <cstdio>
int main() { std::puts("ssmlens"); return 0; }
