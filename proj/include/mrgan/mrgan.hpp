#pragma once

// Everything in one include.

#include "mrgan/checkpoint.hpp"
#include "mrgan/error.hpp"
#include "mrgan/gradcheck.hpp"
#include "mrgan/image.hpp"
#include "mrgan/image_io.hpp"
#include "mrgan/metrics.hpp"
#include "mrgan/model.hpp"
#include "mrgan/ops.hpp"
#include "mrgan/optim.hpp"
#include "mrgan/sphere.hpp"
#include "mrgan/tensor.hpp"
#include "mrgan/train.hpp"
