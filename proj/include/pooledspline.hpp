#pragma once

// Calibrated pooled analysis of matched/nested case-control biomarker
// studies with restricted-cubic-spline dose-response.

#include "pooledspline/calibration.hpp"
#include "pooledspline/data.hpp"
#include "pooledspline/errors.hpp"
#include "pooledspline/inference.hpp"
#include "pooledspline/io.hpp"
#include "pooledspline/likelihood.hpp"
#include "pooledspline/rng.hpp"
#include "pooledspline/simulation.hpp"
#include "pooledspline/spline.hpp"
