#include <catch2/catch_amalgamated.hpp>
#include "bs3fa/align.hpp"
#include "bs3fa/config.hpp"
#include "bs3fa/data.hpp"
#include "bs3fa/distance.hpp"
#include "bs3fa/gibbs.hpp"
#include "bs3fa/pipeline.hpp"
#include "bs3fa/posterior.hpp"
#include "bs3fa/simulate.hpp"
#include "bs3fa/state.hpp"

TEST_CASE("headers compile") { REQUIRE(true); }
