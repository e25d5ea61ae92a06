#pragma once

#include "accentctc/autodiff.hpp"
#include "accentctc/config.hpp"
#include "accentctc/ctc.hpp"
#include "accentctc/data_synth.hpp"
#include "accentctc/eval.hpp"
#include "accentctc/grad_check.hpp"
#include "accentctc/model.hpp"
#include "accentctc/ngram_lm.hpp"
#include "accentctc/nn.hpp"
#include "accentctc/ops.hpp"
#include "accentctc/tensor.hpp"
#include "accentctc/training.hpp"
