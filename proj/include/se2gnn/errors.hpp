#pragma once

#include <stdexcept>
#include <string>

namespace se2gnn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

/// Two nodes of an edge coincide.
class DegenerateEdge : public Error {
 public:
  DegenerateEdge(std::size_t i, std::size_t j)
      : Error("degenerate edge (" + std::to_string(i) + ", " + std::to_string(j) +
              "): coincident nodes"),
        i_(i),
        j_(j) {}
  std::size_t first() const { return i_; }
  std::size_t second() const { return j_; }

 private:
  std::size_t i_, j_;
};

class TriangulationFailed : public Error {
 public:
  using Error::Error;
};

/// Operand shapes of an array primitive are incompatible.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class SolverFailure : public Error {
 public:
  using Error::Error;
};

class CorruptFile : public Error {
 public:
  using Error::Error;
};

/// A manifest references a file that is missing or does not match its checksum.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// A checkpoint does not fit the data or configuration it is used with.
class ArtifactMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace se2gnn
