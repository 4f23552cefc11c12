#pragma once

#include "layerlock/tensor.hpp"
#include "layerlock/rng.hpp"
#include "layerlock/rope.hpp"
#include "layerlock/data.hpp"
#include "layerlock/masking.hpp"
#include "layerlock/vit.hpp"
#include "layerlock/optim.hpp"
#include "layerlock/schedule.hpp"
#include "layerlock/cost.hpp"
#include "layerlock/engine.hpp"
#include "layerlock/jepa.hpp"
#include "layerlock/collapse.hpp"
#include "layerlock/trainer.hpp"
#include "layerlock/analysis.hpp"
#include "layerlock/config.hpp"
#include "layerlock/io.hpp"
#include "layerlock/readout.hpp"
