#pragma once

#include "terfs/checkpoint.hpp"
#include "terfs/dataset.hpp"
#include "terfs/gradcheck.hpp"
#include "terfs/gradients.hpp"
#include "terfs/image_io.hpp"
#include "terfs/losses.hpp"
#include "terfs/metrics.hpp"
#include "terfs/optim.hpp"
#include "terfs/render.hpp"
#include "terfs/scene.hpp"
#include "terfs/train.hpp"
