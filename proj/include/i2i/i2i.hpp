#pragma once

#include "i2i/tensor.hpp"
#include "i2i/ops.hpp"
#include "i2i/kernels.hpp"
#include "i2i/autodiff.hpp"
#include "i2i/nn.hpp"
#include "i2i/models.hpp"
#include "i2i/losses.hpp"
#include "i2i/data.hpp"
#include "i2i/trainer.hpp"
#include "i2i/metrics.hpp"
#include "i2i/io.hpp"
#include "i2i/config.hpp"
#include "i2i/experiment.hpp"
