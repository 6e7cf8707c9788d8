#pragma once

namespace fsvi {
int cli_main(int argc, char** argv);
}
