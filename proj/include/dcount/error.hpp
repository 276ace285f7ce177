#pragma once

#include <stdexcept>
#include <string>

namespace dcount {

// Every failure raised by the library carries a short machine-readable class
// ("config", "shape", ...) so the CLI can print one-line diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define DCOUNT_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(tag, what) {}         \
  };

DCOUNT_DEFINE_ERROR(ConfigError, "config")
DCOUNT_DEFINE_ERROR(ShapeError, "shape")
DCOUNT_DEFINE_ERROR(AnnotationError, "annotation")
DCOUNT_DEFINE_ERROR(IngestionError, "ingestion")
DCOUNT_DEFINE_ERROR(ParseError, "parse")
DCOUNT_DEFINE_ERROR(LabelError, "label")
DCOUNT_DEFINE_ERROR(InputError, "input")
DCOUNT_DEFINE_ERROR(DependencyError, "dependency")
DCOUNT_DEFINE_ERROR(ProtocolError, "protocol")
DCOUNT_DEFINE_ERROR(TrainingError, "training")
DCOUNT_DEFINE_ERROR(IoError, "io")

#undef DCOUNT_DEFINE_ERROR

}  // namespace dcount
