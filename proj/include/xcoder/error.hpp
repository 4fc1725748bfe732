#ifndef XCODER_ERROR_HPP
#define XCODER_ERROR_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace xcoder {

// Base of every error the library raises. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define XCODER_DEFINE_ERROR(Name)                                                                  \
    class Name : public Error {                                                                    \
    public:                                                                                        \
        explicit Name(const std::string &what) : Error(#Name ": " + what) {}                      \
    }

XCODER_DEFINE_ERROR(InvalidShape);
XCODER_DEFINE_ERROR(IoError);
XCODER_DEFINE_ERROR(FormatError);
XCODER_DEFINE_ERROR(DegenerateScale);
XCODER_DEFINE_ERROR(InvalidBatchSize);
XCODER_DEFINE_ERROR(NonFiniteGradient);
XCODER_DEFINE_ERROR(NonFiniteLoss);
XCODER_DEFINE_ERROR(ModelSetMismatch);
XCODER_DEFINE_ERROR(EmptyCriticalSet);
XCODER_DEFINE_ERROR(InvalidFeature);
XCODER_DEFINE_ERROR(DictionaryInfeasible);
XCODER_DEFINE_ERROR(ConfigError);

#undef XCODER_DEFINE_ERROR

class MissingLabel : public Error {
public:
    explicit MissingLabel(std::string sample_id)
        : Error("MissingLabel: no correctness label for sample '" + sample_id + "'"),
          sample_id_(std::move(sample_id))
    {
    }
    const std::string &sample_id() const noexcept { return sample_id_; }

private:
    std::string sample_id_;
};

class DivergedAtStep : public Error {
public:
    explicit DivergedAtStep(std::uint64_t step)
        : Error("DivergedAtStep: total loss became non-finite at step " + std::to_string(step)),
          step_(step)
    {
    }
    std::uint64_t step() const noexcept { return step_; }

private:
    std::uint64_t step_;
};

} // namespace xcoder

#endif
