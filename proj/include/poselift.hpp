#pragma once

#include "poselift/attention.hpp"
#include "poselift/autodiff.hpp"
#include "poselift/checkpoint.hpp"
#include "poselift/config.hpp"
#include "poselift/diffusion.hpp"
#include "poselift/dualstream.hpp"
#include "poselift/errors.hpp"
#include "poselift/harness.hpp"
#include "poselift/metrics.hpp"
#include "poselift/params.hpp"
#include "poselift/pde.hpp"
#include "poselift/pose_io.hpp"
#include "poselift/rng.hpp"
#include "poselift/runtime.hpp"
#include "poselift/skeleton.hpp"
#include "poselift/svd3.hpp"
#include "poselift/tensor.hpp"
