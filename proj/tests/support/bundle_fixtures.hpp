#pragma once

#include <cstddef>
#include <vector>

#include "mmpq/bundle.hpp"

namespace mmpq::testing {

/// Small hand-written bundle (no training, no k-means) used for the
/// byte-exact golden file.
DeploymentBundle golden_bundle();

/// Expected serialized size, counted field by field from the documented
/// layout without touching the serializer.
std::size_t counting_oracle(const DeploymentBundle& bundle);

/// Number of code bytes the documented layout stores for a bundle.
std::size_t code_bytes_oracle(const DeploymentBundle& bundle);

}  // namespace mmpq::testing
