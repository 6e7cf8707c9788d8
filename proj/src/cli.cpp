#include "fsvi/cli.hpp"

namespace fsvi {
int cli_main(int, char**) { return 1; }
}
