// Copyright 2026 The KOTG Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace kotg {

// Every library error derives from Error so callers (CLI, service) can map
// them to user-facing status codes in one place.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class InvariantError : public Error { using Error::Error; };
class UnknownRoleError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class VocabError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class EmptyPromptError : public Error { using Error::Error; };
class CheckpointFormatError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

class TrainingDivergedError : public Error {
public:
    TrainingDivergedError(int64_t step, const std::string & what)
        : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

    int64_t step() const noexcept { return step_; }

private:
    int64_t step_;
};

} // namespace kotg
