#pragma once

#include "owssd/baselines.hpp"
#include "owssd/ensemble.hpp"
#include "owssd/error.hpp"
#include "owssd/fusion.hpp"
#include "owssd/geometry.hpp"
#include "owssd/io.hpp"
#include "owssd/metrics.hpp"
#include "owssd/nnet.hpp"
#include "owssd/parallel.hpp"
#include "owssd/random.hpp"
#include "owssd/synthetic.hpp"
