#include <smtip/cli.hpp>

int main(int argc, char** argv) { return smtip::cli::parse_and_dispatch(argc, argv); }
