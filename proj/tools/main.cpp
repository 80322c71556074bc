#include <iostream>

#include "spinepose/cli.hpp"

int main(int argc, char** argv) {
  return spinepose::dispatch(argc, argv, std::cout, std::cerr);
}
