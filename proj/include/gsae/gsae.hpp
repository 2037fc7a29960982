#pragma once

#include "gsae/errors.hpp"
#include "gsae/numerics/special.hpp"
#include "gsae/numerics/roots.hpp"
#include "gsae/numerics/rng.hpp"
#include "gsae/numerics/optimize.hpp"
#include "gsae/numerics/gauss_hermite.hpp"
#include "gsae/parallel.hpp"
#include "gsae/data.hpp"
#include "gsae/targets.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/glmm.hpp"
#include "gsae/mse.hpp"
#include "gsae/informative.hpp"
#include "gsae/diagnostics.hpp"
#include "gsae/inference.hpp"
#include "gsae/sim.hpp"
#include "gsae/demo.hpp"
