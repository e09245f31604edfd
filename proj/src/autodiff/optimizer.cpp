#include "conbat/autodiff/optimizer.hpp"

namespace conbat::ad {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "rmsprop") return OptimizerKind::rmsprop;
  if (name == "sgd") return OptimizerKind::sgd;
  throw UsageError("unknown optimizer '" + std::string(name) + "' (expected adam, rmsprop or sgd)");
}

std::string_view optimizer_name(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::rmsprop: return "rmsprop";
    case OptimizerKind::sgd: return "sgd";
  }
  return "unknown";
}

}  // namespace conbat::ad
