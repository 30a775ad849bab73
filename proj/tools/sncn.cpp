#include "sncn/cli/dispatch.hpp"

int main(int argc, char **argv) { return sncn::cli::dispatch(argc, argv); }
