#pragma once

// Everything except the command-line front end (milkit/cli.hpp).
#include "milkit/autodiff.hpp"
#include "milkit/dataio.hpp"
#include "milkit/encoder.hpp"
#include "milkit/error.hpp"
#include "milkit/explain.hpp"
#include "milkit/loss_metrics.hpp"
#include "milkit/mil_head.hpp"
#include "milkit/model.hpp"
#include "milkit/rng.hpp"
#include "milkit/selftest.hpp"
#include "milkit/tensor.hpp"
#include "milkit/textio.hpp"
#include "milkit/training.hpp"
