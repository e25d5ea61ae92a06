#include "accentctc/cli.hpp"

int main(int argc, char** argv) { return accentctc::cli::dispatch(argc, argv); }
