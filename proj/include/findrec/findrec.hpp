#pragma once

#include "findrec/autodiff.hpp"
#include "findrec/checkpoint.hpp"
#include "findrec/config.hpp"
#include "findrec/crossmodal.hpp"
#include "findrec/data.hpp"
#include "findrec/encoders.hpp"
#include "findrec/errors.hpp"
#include "findrec/fusion.hpp"
#include "findrec/gradcheck.hpp"
#include "findrec/iicm.hpp"
#include "findrec/mamba.hpp"
#include "findrec/metrics.hpp"
#include "findrec/model.hpp"
#include "findrec/ops.hpp"
#include "findrec/optim.hpp"
#include "findrec/params.hpp"
#include "findrec/rng.hpp"
#include "findrec/synthetic.hpp"
#include "findrec/tensor.hpp"
#include "findrec/trainer.hpp"
