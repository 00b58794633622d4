#pragma once

#include "guie/checkpoint.hpp"
#include "guie/features.hpp"
#include "guie/head.hpp"
#include "guie/optim.hpp"
#include "guie/preprocess.hpp"
#include "guie/retrieval.hpp"
#include "guie/train.hpp"
