#pragma once

// Umbrella header for the voxdiff library: a voxel-lifted, diffusion-based
// visuomotor policy stack with its own reverse-mode autodiff engine, a
// synthetic manipulation environment, and a training/evaluation harness.

#include "voxdiff/common.hpp"
#include "voxdiff/config.hpp"
#include "voxdiff/dataset.hpp"
#include "voxdiff/diffusion.hpp"
#include "voxdiff/encoder.hpp"
#include "voxdiff/env.hpp"
#include "voxdiff/geometry.hpp"
#include "voxdiff/gradcheck.hpp"
#include "voxdiff/harness.hpp"
#include "voxdiff/nn.hpp"
#include "voxdiff/ops_spatial.hpp"
#include "voxdiff/policy.hpp"
#include "voxdiff/serialize.hpp"
#include "voxdiff/tensor.hpp"
#include "voxdiff/tokens.hpp"
