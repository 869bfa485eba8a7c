#ifndef RESMOCO_RESMOCO_HPP
#define RESMOCO_RESMOCO_HPP

#include "resmoco/error.hpp"
#include "resmoco/random.hpp"
#include "resmoco/tensor.hpp"
#include "resmoco/ops.hpp"
#include "resmoco/gradcheck.hpp"
#include "resmoco/nn.hpp"
#include "resmoco/momentum.hpp"
#include "resmoco/objectives.hpp"
#include "resmoco/pipeline.hpp"
#include "resmoco/optim.hpp"
#include "resmoco/trainer.hpp"
#include "resmoco/evalkit.hpp"
#include "resmoco/runstore.hpp"
#include "resmoco/gradcheck_suite.hpp"

#endif  // RESMOCO_RESMOCO_HPP
