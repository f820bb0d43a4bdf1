// SPDX-License-Identifier: Apache-2.0
#pragma once

// Umbrella header. The PNG heatmap writer lives in edrl/heatmap.hpp and is
// not included here, so users who do not need it need not link libpng.

#include "edrl/blobfile.hpp"
#include "edrl/config.hpp"
#include "edrl/datagen.hpp"
#include "edrl/dilr.hpp"
#include "edrl/distill.hpp"
#include "edrl/eprl.hpp"
#include "edrl/metrics.hpp"
#include "edrl/model.hpp"
#include "edrl/nn.hpp"
#include "edrl/optim.hpp"
#include "edrl/rng.hpp"
#include "edrl/tensor.hpp"
#include "edrl/trainer.hpp"
#include "edrl/types.hpp"
