#pragma once

#include <stdexcept>
#include <string>

namespace fewdet {

// Error kinds map one-to-one onto CLI exit codes (see tools/fewdet_main.cpp):
// config errors -> 2, data errors -> 3, numerical failures -> 4.

struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Scene generation could not place the requested objects.
struct placement_error : data_error {
  explicit placement_error(const std::string& msg) : data_error(msg) {}
};

struct dimension_error : std::runtime_error {
  explicit dimension_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct index_error : std::runtime_error {
  explicit index_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value detected; message names the offending op.
struct numerical_error : std::runtime_error {
  explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fewdet
