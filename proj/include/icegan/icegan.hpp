#pragma once

#include "icegan/capsule_ops.hpp"
#include "icegan/commands.hpp"
#include "icegan/config.hpp"
#include "icegan/conv.hpp"
#include "icegan/data.hpp"
#include "icegan/discriminator.hpp"
#include "icegan/evaluation.hpp"
#include "icegan/generator.hpp"
#include "icegan/gradcheck.hpp"
#include "icegan/gradcheck_suites.hpp"
#include "icegan/grm.hpp"
#include "icegan/losses.hpp"
#include "icegan/metrics.hpp"
#include "icegan/nn.hpp"
#include "icegan/random.hpp"
#include "icegan/serialize.hpp"
#include "icegan/tensor.hpp"
#include "icegan/training.hpp"
