#pragma once

#include <string>
#include <string_view>

// Deliberate defects the self-test can switch on to prove it notices them.
// Names: "kl" (variance term of the standard-normal KL), "aggregate" (skips
// weight renormalization). Empty disables every mutation.
namespace feddva::mutation {

void set(std::string_view name);
bool active(std::string_view name);
std::string current();

}  // namespace feddva::mutation
