/* Copyright 2026 The ecglab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Everything except the command layer (ecglab/cli.hpp), which additionally
// needs libcrypto.

#pragma once

#include "ecglab/augment.hpp"
#include "ecglab/checkpoint.hpp"
#include "ecglab/data.hpp"
#include "ecglab/dfnet.hpp"
#include "ecglab/diffusion.hpp"
#include "ecglab/errors.hpp"
#include "ecglab/layers.hpp"
#include "ecglab/metrics.hpp"
#include "ecglab/multitask.hpp"
#include "ecglab/ops.hpp"
#include "ecglab/optim.hpp"
#include "ecglab/rng.hpp"
#include "ecglab/tensor.hpp"
#include "ecglab/training.hpp"
