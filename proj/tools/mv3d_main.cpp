#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::puts("mv3d: subcommands not wired up yet");
  return 0;
}
