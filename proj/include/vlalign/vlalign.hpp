#pragma once

#include "vlalign/config.hpp"
#include "vlalign/core/autograd.hpp"
#include "vlalign/core/ops.hpp"
#include "vlalign/core/rng.hpp"
#include "vlalign/core/tensor.hpp"
#include "vlalign/records.hpp"
#include "vlalign/backbone.hpp"
#include "vlalign/vision_encoder.hpp"
#include "vlalign/language_processor.hpp"
#include "vlalign/alignment.hpp"
#include "vlalign/masked_modeling.hpp"
#include "vlalign/model.hpp"
#include "vlalign/trainer.hpp"
#include "vlalign/evaluator.hpp"
