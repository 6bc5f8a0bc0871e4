#pragma once

// Umbrella header for the numerical library. The pipeline, config and io
// headers additionally need nlohmann/json and toml++.

#include <koopeig/common.hpp>
#include <koopeig/control.hpp>
#include <koopeig/inputdyn.hpp>
#include <koopeig/optimizer.hpp>
#include <koopeig/spatial.hpp>
#include <koopeig/spectral.hpp>
#include <koopeig/spline.hpp>
#include <koopeig/systems.hpp>
