#pragma once
// Umbrella header.

#include "pmc/error.hpp"
#include "pmc/model.hpp"
#include "pmc/builtin.hpp"
#include "pmc/model_io.hpp"
#include "pmc/sim.hpp"
#include "pmc/nash.hpp"
#include "pmc/bsde.hpp"
#include "pmc/hjb.hpp"
#include "pmc/contract.hpp"
#include "pmc/config.hpp"
#include "pmc/cli.hpp"
