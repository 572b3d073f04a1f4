#pragma once

// Command-line entry point: train / invert / erase / reconstruct / gradcheck /
// sweep, wired through RunConfig with dotted-path overrides.

namespace eraser {

// Returns the process exit code: 0 ok, 1 contract violation, 2 bad config.
int run_cli(int argc, char ** argv);

} // namespace eraser
