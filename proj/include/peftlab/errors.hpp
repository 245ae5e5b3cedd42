// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace peftlab {

/// Base of every error raised by the library.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define PEFTLAB_DEFINE_ERROR(name)          \
    class name : public error {            \
    public:                                 \
        using error::error;                 \
    }

PEFTLAB_DEFINE_ERROR(dimension_error);
PEFTLAB_DEFINE_ERROR(index_error);
PEFTLAB_DEFINE_ERROR(contract_error);
PEFTLAB_DEFINE_ERROR(config_error);
PEFTLAB_DEFINE_ERROR(state_error);
PEFTLAB_DEFINE_ERROR(length_error);
PEFTLAB_DEFINE_ERROR(data_error);
PEFTLAB_DEFINE_ERROR(io_error);
PEFTLAB_DEFINE_ERROR(schema_error);
PEFTLAB_DEFINE_ERROR(parse_error);
PEFTLAB_DEFINE_ERROR(unsupported_merge_error);

#undef PEFTLAB_DEFINE_ERROR

}  // namespace peftlab
