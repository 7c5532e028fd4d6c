// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "drclf/distill.hpp"
#include "drclf/error.hpp"
#include "drclf/evaluation.hpp"
#include "drclf/featurebank.hpp"
#include "drclf/mlp.hpp"
#include "drclf/model_file.hpp"
#include "drclf/optimizer.hpp"
#include "drclf/robust_loss.hpp"
#include "drclf/run_manifest.hpp"
#include "drclf/seed.hpp"
