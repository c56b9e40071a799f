#include "neft/autograd.hpp"
#include "neft/tensor.hpp"

#include <sstream>

namespace neft {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool grad_mode_enabled = true;
}  // namespace

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

template <typename Scalar>
Tape<Scalar>& Tape<Scalar>::active() {
  thread_local Tape tape;
  return tape;
}

template <typename Scalar>
void Tape<Scalar>::backward(const Tensor<Scalar>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  Storage& root = *loss.storage();
  if (!root.requires_grad) {
    throw ContractError("backward: loss does not depend on any tensor that requires grad");
  }
  if (!root.leaf && root.generation != generation_) {
    throw ContractError(
        "backward: stale tape; the loss was produced before the last backward/clear, "
        "re-run the forward pass");
  }
  grad_buffer(root).array() += Scalar(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.size() == 0) continue;
    it->rule(*it->output);
  }
  clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace neft
