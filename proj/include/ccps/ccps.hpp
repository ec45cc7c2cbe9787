#pragma once

#include "ccps/errors.hpp"
#include "ccps/feature_file.hpp"
#include "ccps/features.hpp"
#include "ccps/metrics.hpp"
#include "ccps/model.hpp"
#include "ccps/msp.hpp"
#include "ccps/nn.hpp"
#include "ccps/perturbation.hpp"
#include "ccps/probe_data.hpp"
#include "ccps/rng.hpp"
#include "ccps/toy_lm.hpp"
#include "ccps/training.hpp"
