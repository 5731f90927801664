#pragma once

#include <stdexcept>
#include <string>

namespace haco {

// Base for all pipeline errors so callers can catch one type per stage.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class MissingRequiredColumnError : public Error {
public:
  explicit MissingRequiredColumnError(const std::string& column)
      : Error("missing required column: " + column), column_(column) {}
  const std::string& column() const { return column_; }

private:
  std::string column_;
};

class EmptyDatasetError : public Error {
public:
  explicit EmptyDatasetError(const std::string& msg = "dataset has no valid rows") : Error(msg) {}
};

class InsufficientEpisodesError : public Error {
public:
  explicit InsufficientEpisodesError(const std::string& msg) : Error(msg) {}
};

class InvalidConfigError : public Error {
public:
  explicit InvalidConfigError(const std::string& msg) : Error(msg) {}
};

class DegenerateLabelsError : public Error {
public:
  explicit DegenerateLabelsError(const std::string& msg) : Error(msg) {}
};

class DidNotConvergeError : public Error {
public:
  DidNotConvergeError(const std::string& msg, double final_grad_norm)
      : Error(msg + " (final gradient norm " + std::to_string(final_grad_norm) + ")"),
        final_grad_norm_(final_grad_norm) {}
  double final_grad_norm() const { return final_grad_norm_; }

private:
  double final_grad_norm_;
};

class FeatureMismatchError : public Error {
public:
  explicit FeatureMismatchError(const std::string& msg) : Error(msg) {}
};

class EmptyCalibrationError : public Error {
public:
  EmptyCalibrationError() : Error("calibration score set is empty") {}
};

class InvalidAlphaError : public Error {
public:
  explicit InvalidAlphaError(double alpha)
      : Error("risk level alpha must be in (0,1), got " + std::to_string(alpha)) {}
};

class EmptySafeSetError : public Error {
public:
  explicit EmptySafeSetError(const std::string& msg = "safe set is empty") : Error(msg) {}
};

class SingleActionSafeSetError : public Error {
public:
  explicit SingleActionSafeSetError(
      const std::string& msg = "safe set covers only one distinct action")
      : Error(msg) {}
};

class InsufficientDataError : public Error {
public:
  explicit InsufficientDataError(const std::string& msg) : Error(msg) {}
};

class ZeroVarianceError : public Error {
public:
  explicit ZeroVarianceError(const std::string& msg = "pooled standard deviation is zero") : Error(msg) {}
};

class TooFewSamplesError : public Error {
public:
  explicit TooFewSamplesError(const std::string& msg) : Error(msg) {}
};

class NoDemographicsError : public Error {
public:
  NoDemographicsError() : Error("dataset carries no demographics; merge them before auditing") {}
};

class MissingStageOutputError : public Error {
public:
  explicit MissingStageOutputError(const std::string& msg) : Error(msg) {}
};

// Wraps any stage failure with the stage name so the CLI can report it.
class StageError : public Error {
public:
  StageError(const std::string& stage, const std::string& msg)
      : Error("stage " + stage + ": " + msg), stage_(stage) {}
  const std::string& stage() const { return stage_; }

private:
  std::string stage_;
};

}  // namespace haco
