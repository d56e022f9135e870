#pragma once

#include "liwn/checkpoint.hpp"
#include "liwn/config.hpp"
#include "liwn/cost_audit.hpp"
#include "liwn/data.hpp"
#include "liwn/dtcwt.hpp"
#include "liwn/error.hpp"
#include "liwn/experiment.hpp"
#include "liwn/filters.hpp"
#include "liwn/gradcheck.hpp"
#include "liwn/invariant_layer.hpp"
#include "liwn/models.hpp"
#include "liwn/nn.hpp"
#include "liwn/scattering.hpp"
#include "liwn/tensor.hpp"
#include "liwn/train.hpp"
