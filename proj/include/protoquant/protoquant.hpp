#pragma once

// Everything except the HTTP layer (service.hpp), which pulls in httplib.

#include "binary_io.hpp"
#include "checkpoint.hpp"
#include "codebook.hpp"
#include "errors.hpp"
#include "experiments.hpp"
#include "explain.hpp"
#include "featurestore.hpp"
#include "head.hpp"
#include "metrics.hpp"
#include "numerics.hpp"
#include "optim.hpp"
#include "pruning.hpp"
#include "rng.hpp"
