#pragma once

#include "tamed_sde/convergence.hpp"
#include "tamed_sde/errors.hpp"
#include "tamed_sde/feynman_kac.hpp"
#include "tamed_sde/gallery.hpp"
#include "tamed_sde/integrators.hpp"
#include "tamed_sde/linalg.hpp"
#include "tamed_sde/lyapunov.hpp"
#include "tamed_sde/model.hpp"
#include "tamed_sde/parallel.hpp"
#include "tamed_sde/random.hpp"
#include "tamed_sde/stats.hpp"
#include "tamed_sde/variational.hpp"
