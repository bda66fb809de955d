#include "ambulate/error.hpp"

namespace ambulate {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::TraceTooShort: return "TraceTooShort";
    case ErrorKind::InvalidSample: return "InvalidSample";
    case ErrorKind::DegenerateOrientation: return "DegenerateOrientation";
    case ErrorKind::DegenerateChannel: return "DegenerateChannel";
    case ErrorKind::DatasetFormatError: return "DatasetFormatError";
    case ErrorKind::SpecError: return "SpecError";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::NumericalError: return "NumericalError";
    case ErrorKind::CorruptModel: return "CorruptModel";
    case ErrorKind::SelectionEmpty: return "SelectionEmpty";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace ambulate
