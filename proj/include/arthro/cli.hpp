#pragma once

// Command-line entry point. Subcommands: synth, pretrain, finetune, eval,
// loocv, compare, gradcheck, infer. Returns 0 on success, 1 on runtime
// failure, 2 on bad flags or config.
namespace arthro::cli {

int run(int argc, const char* const* argv);

}  // namespace arthro::cli
