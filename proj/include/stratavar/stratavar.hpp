#pragma once

#include "stratavar/design.hpp"
#include "stratavar/error.hpp"
#include "stratavar/estimators.hpp"
#include "stratavar/hettest.hpp"
#include "stratavar/io.hpp"
#include "stratavar/oracle.hpp"
#include "stratavar/parallel.hpp"
#include "stratavar/projection.hpp"
#include "stratavar/simulation.hpp"
