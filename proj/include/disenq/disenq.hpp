#pragma once

#include "disenq/core.hpp"
#include "disenq/autodiff.hpp"
#include "disenq/world.hpp"
#include "disenq/encoder.hpp"
#include "disenq/query_transformer.hpp"
#include "disenq/losses.hpp"
#include "disenq/identification.hpp"
#include "disenq/config.hpp"
#include "disenq/model.hpp"
#include "disenq/io.hpp"
#include "disenq/checkpoint.hpp"
#include "disenq/training.hpp"
#include "disenq/diagnostics.hpp"
#include "disenq/plot.hpp"
#include "disenq/harness.hpp"
