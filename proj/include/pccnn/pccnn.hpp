#pragma once

// Umbrella header.

#include "pccnn/adam.hpp"
#include "pccnn/autodiff.hpp"
#include "pccnn/checkpoint.hpp"
#include "pccnn/conv.hpp"
#include "pccnn/data.hpp"
#include "pccnn/image.hpp"
#include "pccnn/image_io.hpp"
#include "pccnn/mask.hpp"
#include "pccnn/metrics.hpp"
#include "pccnn/model.hpp"
#include "pccnn/ops.hpp"
#include "pccnn/parallel.hpp"
#include "pccnn/rng.hpp"
#include "pccnn/sampling.hpp"
#include "pccnn/service.hpp"
#include "pccnn/tensor.hpp"
#include "pccnn/training.hpp"
