// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>

namespace convlora {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define CONVLORA_DECLARE_ERROR(name)          \
    class name : public Error {               \
    public:                                   \
        using Error::Error;                   \
    }

CONVLORA_DECLARE_ERROR(DimensionError);
CONVLORA_DECLARE_ERROR(ArgumentError);
CONVLORA_DECLARE_ERROR(ConfigError);
CONVLORA_DECLARE_ERROR(NumericError);
CONVLORA_DECLARE_ERROR(DegenerateGateError);
CONVLORA_DECLARE_ERROR(DataError);
CONVLORA_DECLARE_ERROR(CapacityError);
CONVLORA_DECLARE_ERROR(CheckpointError);
CONVLORA_DECLARE_ERROR(OracleInvalidError);

#undef CONVLORA_DECLARE_ERROR

} // namespace convlora
