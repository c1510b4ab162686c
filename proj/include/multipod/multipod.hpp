#pragma once

#include "multipod/checkpoint.hpp"
#include "multipod/core.hpp"
#include "multipod/dataset.hpp"
#include "multipod/evaluation.hpp"
#include "multipod/filters.hpp"
#include "multipod/image.hpp"
#include "multipod/model.hpp"
#include "multipod/nn.hpp"
#include "multipod/pipeline.hpp"
#include "multipod/training.hpp"
