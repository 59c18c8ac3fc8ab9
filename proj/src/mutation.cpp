#include "feddva/mutation.hpp"

#include <mutex>

namespace feddva::mutation {

namespace {
std::mutex g_mu;
std::string g_name;
}  // namespace

void set(std::string_view name) {
  std::lock_guard lock(g_mu);
  g_name = name;
}

bool active(std::string_view name) {
  std::lock_guard lock(g_mu);
  return !g_name.empty() && g_name == name;
}

std::string current() {
  std::lock_guard lock(g_mu);
  return g_name;
}

}  // namespace feddva::mutation
