#pragma once

#include "msbdn/autograd.hpp"
#include "msbdn/checkpoint.hpp"
#include "msbdn/config.hpp"
#include "msbdn/data.hpp"
#include "msbdn/haze.hpp"
#include "msbdn/image_io.hpp"
#include "msbdn/kernels.hpp"
#include "msbdn/metrics.hpp"
#include "msbdn/network.hpp"
#include "msbdn/parameters.hpp"
#include "msbdn/rng.hpp"
#include "msbdn/tensor.hpp"
#include "msbdn/tensor_io.hpp"
#include "msbdn/training.hpp"
