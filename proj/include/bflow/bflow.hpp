#pragma once

#include "bflow/analysis.hpp"
#include "bflow/config.hpp"
#include "bflow/core.hpp"
#include "bflow/dataset.hpp"
#include "bflow/diffusion_labeler.hpp"
#include "bflow/exit_model.hpp"
#include "bflow/flowmap_generator.hpp"
#include "bflow/manifest.hpp"
#include "bflow/neural.hpp"
#include "bflow/parallel.hpp"
#include "bflow/pipeline.hpp"
#include "bflow/problems.hpp"
#include "bflow/rng.hpp"
#include "bflow/sde.hpp"
#include "bflow/stats.hpp"
#include "bflow/svg.hpp"
