#pragma once

// Umbrella header for the myelin-water relaxometry toolkit.

#include "mwnet/common.hpp"
#include "mwnet/echo_cube.hpp"
#include "mwnet/epg.hpp"
#include "mwnet/experiments.hpp"
#include "mwnet/fitting.hpp"
#include "mwnet/mlp.hpp"
#include "mwnet/nnls.hpp"
#include "mwnet/parallel.hpp"
#include "mwnet/phantom.hpp"
#include "mwnet/stats.hpp"
#include "mwnet/svg.hpp"
#include "mwnet/t2grid.hpp"
#include "mwnet/training.hpp"
