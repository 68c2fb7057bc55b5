#pragma once

#include "gplsim/bootstrap.hpp"
#include "gplsim/cli.hpp"
#include "gplsim/competitors.hpp"
#include "gplsim/el.hpp"
#include "gplsim/errors.hpp"
#include "gplsim/io.hpp"
#include "gplsim/model.hpp"
#include "gplsim/parallel.hpp"
#include "gplsim/profile.hpp"
#include "gplsim/simulation.hpp"
#include "gplsim/splines.hpp"
#include "gplsim/working_cov.hpp"
