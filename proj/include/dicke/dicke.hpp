// Umbrella header.

#pragma once

#include "dicke/analysis.hpp"
#include "dicke/fitting.hpp"
#include "dicke/model.hpp"
#include "dicke/qops.hpp"
#include "dicke/spectra.hpp"
