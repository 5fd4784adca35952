#pragma once

#include <stdexcept>
#include <string>

namespace ambokd {

// Error categories. Each maps onto a distinct CLI exit path.
struct dimension_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct parameter_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct data_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct state_error : std::logic_error {
  using std::logic_error::logic_error;
};
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ambokd
