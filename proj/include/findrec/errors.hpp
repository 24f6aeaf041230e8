#pragma once

#include <stdexcept>
#include <string>

namespace findrec {

// Base of every error raised by the library. `code()` is a short stable
// identifier used by the CLI for its `error[<code>]:` lines.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define FINDREC_DEFINE_ERROR(Name, code_str)                       \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what) : Error(code_str, what) {} \
  };

// numerical / graph
FINDREC_DEFINE_ERROR(ShapeMismatch, "shape_mismatch")
FINDREC_DEFINE_ERROR(NumericalError, "numerical")
FINDREC_DEFINE_ERROR(GraphError, "graph")
FINDREC_DEFINE_ERROR(DegenerateSamples, "degenerate_samples")
FINDREC_DEFINE_ERROR(SolveError, "solve")

// data
FINDREC_DEFINE_ERROR(ParseError, "parse")
FINDREC_DEFINE_ERROR(EmptyDataset, "empty_dataset")
FINDREC_DEFINE_ERROR(BadMagic, "bad_magic")
FINDREC_DEFINE_ERROR(VersionMismatch, "version_mismatch")
FINDREC_DEFINE_ERROR(CorruptRecord, "corrupt_record")
FINDREC_DEFINE_ERROR(IndexError, "index")
FINDREC_DEFINE_ERROR(TargetExcluded, "target_excluded")
FINDREC_DEFINE_ERROR(IoError, "io")

// configuration
FINDREC_DEFINE_ERROR(ConfigError, "config")
FINDREC_DEFINE_ERROR(UnknownKey, "unknown_key")
FINDREC_DEFINE_ERROR(TypeError, "type")

#undef FINDREC_DEFINE_ERROR

class MissingItem : public Error {
 public:
  explicit MissingItem(long long item_id)
      : Error("missing_item", "feature table lacks item " + std::to_string(item_id)),
        item_id_(item_id) {}
  long long item_id() const noexcept { return item_id_; }

 private:
  long long item_id_;
};

}  // namespace findrec
