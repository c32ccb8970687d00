// dhtidx: run the indexer, simulate scenarios, emit analysis datasets.

#include <CLI11.hpp>

#include <cctype>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "dhtidx/analysis.hpp"
#include "dhtidx/live_runtime.hpp"
#include "dhtidx/pipeline.hpp"
#include "dhtidx/simnet.hpp"

namespace {

using namespace dhtidx;

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

LiveRuntime* g_runtime = nullptr;

extern "C" void on_signal(int) {
    if (g_runtime) g_runtime->stop();
}

std::string env_name(const std::string& key) {
    std::string out = "DHTIDX_";
    for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

// DHTIDX_STORE_DIR=... overrides store.dir and so on.
std::map<std::string, std::string> env_overrides() {
    std::map<std::string, std::string> out;
    for (const auto& key : indexer_config_keys()) {
        if (const char* v = std::getenv(env_name(key).c_str())) out[key] = v;
    }
    return out;
}

void write_output(const std::optional<std::string>& path, const std::string& text) {
    if (!path) {
        std::cout << text << std::flush;
        return;
    }
    std::ofstream out(*path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + *path + " for writing");
    out << text;
    out.close();
    if (!out) throw std::runtime_error("write to " + *path + " failed");
}

int cmd_run(const std::string& config_path, double duration_s) {
    const auto config = load_indexer_config(config_path, env_overrides());
    LiveRuntime runtime;
    Indexer indexer(runtime, config);
    indexer.set_stats_sink([](const std::string& line) { std::cout << line << std::endl; });
    indexer.start();
    g_runtime = &runtime;
    std::signal(SIGTERM, on_signal);
    std::signal(SIGINT, on_signal);
    if (duration_s > 0) {
        runtime.run_for(std::chrono::duration_cast<Duration>(std::chrono::duration<double>(duration_s)));
    } else {
        runtime.run();
    }
    g_runtime = nullptr;
    indexer.stop();
    std::cout << indexer.stats_line() << std::endl;
    return kOk;
}

int cmd_simulate(const std::string& scenario_path, std::optional<std::uint64_t> seed,
                 const std::optional<std::string>& out) {
    auto scenario = sim::load_scenario(scenario_path);
    if (seed) scenario.seed = *seed;
    const auto started = std::chrono::steady_clock::now();
    auto world = sim::SimWorld::build(scenario);
    const auto metrics = world->run();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_output(out, metrics.csv());
    std::fprintf(stderr,
                 "simulate: seed=%llu torrents=%zu reachable=%zu harvested=%zu indexed=%zu reachable_indexed=%zu "
                 "audit_failures=%zu wall_s=%.1f\n",
                 static_cast<unsigned long long>(scenario.seed), metrics.torrents, metrics.reachable_torrents,
                 metrics.harvested, metrics.indexed, metrics.reachable_indexed, metrics.audit_failures.size(), wall);
    return metrics.audit_failures.empty() ? kOk : kRuntime;
}

int cmd_analyze(std::uint64_t keys, std::uint64_t seed, const std::optional<std::string>& out) {
    write_output(out, analyze_distance(keys, seed).csv());
    return kOk;
}

int cmd_dump_stats(const std::string& config_path) {
    const auto config = load_indexer_config(config_path, env_overrides());
    if (!config.store.dir) throw ConfigError("store.dir", "store.dir is not set; nothing to read");
    Store store(config.store);
    const auto c = store.counts();
    std::string line = "store v=1 total=" + std::to_string(c.total);
    for (std::size_t i = 0; i < c.by_state.size(); ++i) {
        line += std::string(" ") + to_string(static_cast<RecordState>(i)) + "=" + std::to_string(c.by_state[i]);
    }
    std::cout << line << std::endl;
    return kOk;
}

int cmd_export(const std::string& config_path, const std::optional<std::string>& out) {
    const auto config = load_indexer_config(config_path, env_overrides());
    if (!config.store.dir) throw ConfigError("store.dir", "store.dir is not set; nothing to export");
    Store store(config.store);
    std::ostringstream text;
    store.export_text(text);
    write_output(out, text.str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dhtidx: BitTorrent DHT indexer"};
    app.require_subcommand(1);

    std::string config_path, scenario_path;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::uint64_t keys = 0;
    std::uint64_t analysis_seed = 1;
    double duration_s = 0;

    auto* run = app.add_subcommand("run", "run the live indexer until SIGTERM/SIGINT");
    run->add_option("--config", config_path, "config file")->required();
    run->add_option("--duration", duration_s, "stop after this many seconds (0 = until signalled)");

    auto* simulate = app.add_subcommand("simulate", "run a simulated scenario and write the metrics CSV");
    simulate->add_option("--scenario", scenario_path, "scenario file")->required();
    simulate->add_option("--seed", seed, "override the scenario seed");
    simulate->add_option("--out", out, "metrics CSV path (default stdout)");

    auto* analyze = app.add_subcommand("analyze-distance", "adjacent-key distance histograms for sorted random keys");
    analyze->add_option("--keys", keys, "number of random keys")->required();
    analyze->add_option("--seed", analysis_seed, "random seed");
    analyze->add_option("--out", out, "CSV path (default stdout)");

    auto* dump = app.add_subcommand("dump-stats", "print record counts of the store named by the config");
    dump->add_option("--config", config_path, "config file")->required();

    auto* exporter = app.add_subcommand("export-index", "write the store as text, one record per line");
    exporter->add_option("--config", config_path, "config file")->required();
    exporter->add_option("--out", out, "output path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "dhtidx: " << e.what() << "\n";
        return kUsage;
    }

    try {
        if (*run) return cmd_run(config_path, duration_s);
        if (*simulate) return cmd_simulate(scenario_path, seed, out);
        if (*analyze) {
            if (keys < 2) {
                std::cerr << "dhtidx: --keys must be at least 2\n";
                return kUsage;
            }
            return cmd_analyze(keys, analysis_seed, out);
        }
        if (*dump) return cmd_dump_stats(config_path);
        if (*exporter) return cmd_export(config_path, out);
    } catch (const ConfigError& e) {
        std::cerr << "dhtidx: config error: " << e.what() << "\n";
        return kRuntime;
    } catch (const std::exception& e) {
        std::cerr << "dhtidx: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
