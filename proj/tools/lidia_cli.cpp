#include <cstdio>

int main() {
  std::puts("lidia: subcommands not wired yet");
  return 1;
}
