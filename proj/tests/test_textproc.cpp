#include <catch2/catch_amalgamated.hpp>
#include "meit/meit.hpp"
TEST_CASE("smoke") { meit::Rng r(1); REQUIRE(r.uniform() >= 0.0); }
