// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Everything at once.

#pragma once

#include "dyffuse/core.hpp"
#include "dyffuse/tensor.hpp"
#include "dyffuse/autodiff.hpp"
#include "dyffuse/optim.hpp"
#include "dyffuse/checkpoint.hpp"
#include "dyffuse/dynamics.hpp"
#include "dyffuse/schedule.hpp"
#include "dyffuse/nets.hpp"
#include "dyffuse/sampling.hpp"
#include "dyffuse/ode_analysis.hpp"
#include "dyffuse/metrics.hpp"
#include "dyffuse/training.hpp"
#include "dyffuse/baselines.hpp"
#include "dyffuse/config.hpp"
#include "dyffuse/experiment.hpp"
