#pragma once

#include "topopt/dataset.hpp"
#include "topopt/eval.hpp"
#include "topopt/fem.hpp"
#include "topopt/nn/layers.hpp"
#include "topopt/nn/loss.hpp"
#include "topopt/nn/optim.hpp"
#include "topopt/nn/tensor.hpp"
#include "topopt/pipeline.hpp"
#include "topopt/simp.hpp"
#include "topopt/training.hpp"
#include "topopt/unet.hpp"
