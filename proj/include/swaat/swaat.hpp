#pragma once

#include "swaat/common.hpp"
#include "swaat/tensor.hpp"
#include "swaat/layers.hpp"
#include "swaat/network.hpp"
#include "swaat/gradcheck.hpp"
#include "swaat/data.hpp"
#include "swaat/attack.hpp"
#include "swaat/swa.hpp"
#include "swaat/resample.hpp"
#include "swaat/checkpoint.hpp"
#include "swaat/train.hpp"
#include "swaat/ensemble.hpp"
#include "swaat/config.hpp"
#include "swaat/commands.hpp"
