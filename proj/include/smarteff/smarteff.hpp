#pragma once

#include "smarteff/errors.hpp"
#include "smarteff/trial_data.hpp"
#include "smarteff/weights.hpp"
#include "smarteff/msm.hpp"
#include "smarteff/contrasts.hpp"
#include "smarteff/techniques.hpp"
#include "smarteff/simulator.hpp"
#include "smarteff/config.hpp"
