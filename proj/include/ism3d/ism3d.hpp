#pragma once

#include "ism3d/codebook.hpp"
#include "ism3d/common.hpp"
#include "ism3d/detector.hpp"
#include "ism3d/evaluation.hpp"
#include "ism3d/features.hpp"
#include "ism3d/image.hpp"
#include "ism3d/model.hpp"
#include "ism3d/parallel.hpp"
#include "ism3d/segmentation.hpp"
#include "ism3d/synthgen.hpp"
#include "ism3d/voting.hpp"
