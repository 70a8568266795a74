#pragma once

#include "pit/autodiff.hpp"
#include "pit/binio.hpp"
#include "pit/config.hpp"
#include "pit/data.hpp"
#include "pit/explorer.hpp"
#include "pit/gradcheck.hpp"
#include "pit/loss.hpp"
#include "pit/mask.hpp"
#include "pit/network.hpp"
#include "pit/optim.hpp"
#include "pit/rng.hpp"
#include "pit/tensor.hpp"
#include "pit/trainer.hpp"
