#pragma once

#include <stdexcept>
#include <string>

namespace btd {

/// Operand extents do not agree with what an operation requires.
class DimensionError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// A hyperparameter or structural setting is out of its valid range.
class ConfigError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// An API was called in a state or with arguments it does not accept.
class UsageError : public std::logic_error {
public:
	using std::logic_error::logic_error;
};

/// A file on disk is malformed or inconsistent with its index.
class FormatError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Training hit a non-finite loss; the message names the dump file.
class TrainingError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

} // namespace btd
