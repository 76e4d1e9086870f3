#pragma once

/// \file errors.hpp
/// Exception hierarchy. Every failure raised by the library derives from cpcl::Error.

#include <stdexcept>
#include <string>

namespace cpcl {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define CPCL_DEFINE_ERROR(Name)                \
    class Name : public Error {                \
    public:                                    \
        using Error::Error;                    \
    }

CPCL_DEFINE_ERROR(FormatError);
CPCL_DEFINE_ERROR(EmptyCorpusError);
CPCL_DEFINE_ERROR(DegenerateVectorError);
CPCL_DEFINE_ERROR(ReferentialIntegrityError);
CPCL_DEFINE_ERROR(IoError);
CPCL_DEFINE_ERROR(ParameterError);
CPCL_DEFINE_ERROR(EmptyMemoryError);
CPCL_DEFINE_ERROR(IndexError);
CPCL_DEFINE_ERROR(EmptyBatchError);
CPCL_DEFINE_ERROR(DegenerateMatchError);
CPCL_DEFINE_ERROR(DegenerateEpochError);
CPCL_DEFINE_ERROR(NonFiniteGradientError);
CPCL_DEFINE_ERROR(EvalWithoutTruthError);

#undef CPCL_DEFINE_ERROR

}  // namespace cpcl
