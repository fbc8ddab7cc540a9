#pragma once

#include "xmodal/ablation.hpp"
#include "xmodal/autodiff.hpp"
#include "xmodal/decoder.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/error.hpp"
#include "xmodal/fft.hpp"
#include "xmodal/fusion.hpp"
#include "xmodal/geometry.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/imageio.hpp"
#include "xmodal/metrics.hpp"
#include "xmodal/model.hpp"
#include "xmodal/objectives.hpp"
#include "xmodal/params.hpp"
#include "xmodal/synthdata.hpp"
#include "xmodal/trainer.hpp"
