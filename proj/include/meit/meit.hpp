// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meit/bench.hpp"
#include "meit/checkpoint.hpp"
#include "meit/common.hpp"
#include "meit/encoder.hpp"
#include "meit/instruct.hpp"
#include "meit/mat.hpp"
#include "meit/metrics.hpp"
#include "meit/model.hpp"
#include "meit/rng.hpp"
#include "meit/signal.hpp"
#include "meit/textproc.hpp"
#include "meit/trainer.hpp"
#include "meit/transformer.hpp"
