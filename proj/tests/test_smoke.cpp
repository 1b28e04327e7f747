#include <catch_amalgamated.hpp>

#include <mwnet/mwnet.hpp>

TEST_CASE("umbrella header compiles and basic objects construct") {
    const mwnet::T2Grid grid = mwnet::make_t2_grid();
    REQUIRE(grid.size() == 120);
    REQUIRE(grid.points[0] == Catch::Approx(15.0));
    REQUIRE(grid.points[119] == Catch::Approx(2000.0));

    const mwnet::FitConfig cfg = mwnet::FitConfig::defaults();
    cfg.validate();

    mwnet::CohortConfig cc;
    cc.validate();
}
