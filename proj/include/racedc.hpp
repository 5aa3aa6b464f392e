#ifndef RACEDC_HPP
#define RACEDC_HPP

#include "racedc/aggregate.hpp"
#include "racedc/baselines.hpp"
#include "racedc/core.hpp"
#include "racedc/datagen.hpp"
#include "racedc/experiment.hpp"
#include "racedc/local_estimators.hpp"
#include "racedc/models.hpp"
#include "racedc/protocol.hpp"
#include "racedc/remodel.hpp"
#include "racedc/rng.hpp"

#endif
