// uhrseg: dataset generation, training, memory-budgeted inference,
// evaluation and the patch-size benchmark sweep in one executable.
//
// Exit codes: 0 ok, 2 config/usage error, 3 I/O error, 4 memory budget
// exceeded, 5 numeric failure.

#include "uhrseg/config.hpp"
#include "uhrseg/dataset.hpp"
#include "uhrseg/metrics.hpp"
#include "uhrseg/scene.hpp"
#include "uhrseg/tiling.hpp"
#include "uhrseg/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace uhrseg;

namespace {

bool verbose() {
    const char* v = std::getenv("UHRSEG_VERBOSE");
    return v && *v && std::string(v) != "0";
}

void note(const std::string& msg) {
    if (verbose()) std::cerr << msg << "\n";
}

int run_gen(const std::string& out, int64_t scenes, int64_t size, int64_t classes,
            uint64_t seed) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("gen: cannot create " + out);
    for (int64_t i = 0; i < scenes; ++i) {
        Scene sc = generate_scene(seed + static_cast<uint64_t>(i), size, size, classes);
        std::ostringstream stem;
        stem << std::setw(4) << std::setfill('0') << i;
        write_scene(out, stem.str(), sc);
        note("gen: wrote scene " + stem.str());
    }
    Manifest m = build_manifest(out, {0.7, 0.15, 0.15}, seed);
    save_manifest(m, (fs::path(out) / "manifest.json").string());
    note("gen: manifest with " + std::to_string(m.train.size()) + "/" +
         std::to_string(m.val.size()) + "/" + std::to_string(m.test.size()) + " scenes");
    return 0;
}

int run_train(const std::string& config_path, const std::string& out) {
    RunConfig cfg = RunConfig::from_file(config_path);
    RunRecord rec = train(cfg, out);
    std::cout << nlohmann::json({{"record_hash", rec.record_hash()},
                                 {"test_miou", rec.final_test.miou}})
                     .dump()
              << "\n";
    return 0;
}

int run_infer(const std::string& ckpt, const std::string& image_path,
              const std::string& mode, int64_t patch, int64_t overlap, int64_t budget,
              int64_t chunk_rows, int64_t workers, int64_t target_side,
              const std::string& out, std::string report_path) {
    LoadedModel lm = load_model(ckpt);
    ImageU8 image = read_ppm(image_path);
    InferOptions opt;
    opt.patch = patch;
    opt.overlap = overlap;
    opt.budget_bytes = budget;
    opt.chunk_rows = chunk_rows;
    opt.workers = workers;
    opt.target_side = target_side;
    if (report_path.empty()) report_path = out + ".report.json";

    try {
        auto [labels, rep] =
            mode == "global" ? infer_global(image, lm, opt) : infer_local(image, lm, opt);
        write_pgm(out, labels);
        std::ofstream rf(report_path);
        rf << rep.to_json().dump(2) << "\n";
        std::cout << rep.to_json().dump() << "\n";
        return 0;
    } catch (const BudgetError& e) {
        // budget failures still emit the memory report
        MemoryReport rep;
        rep.budget_bytes = budget;
        rep.measured_peak_bytes = memtrack::peak_bytes();
        rep.estimated_peak_bytes = estimate_peak_memory(
            lm.model.cfg, lm.flags, patch, chunk_rows, image.h, image.w);
        rep.per_stage["failed_stage_" + e.stage()] = rep.measured_peak_bytes;
        std::ofstream rf(report_path);
        rf << rep.to_json().dump(2) << "\n";
        std::cerr << "budget exceeded: " << e.what() << "\n";
        return 4;
    }
}

int run_eval(const std::string& pred_path, const std::string& gt_path, int64_t classes) {
    LabelMap pred = read_pgm(pred_path);
    LabelMap gt = read_pgm(gt_path);
    IoUReport r = miou(pred, gt, classes);
    std::cout << r.to_json().dump(2) << "\n";
    return 0;
}

int run_bench(const std::string& ckpt, const std::string& image_path,
              const std::string& gt_path, const std::vector<int64_t>& patches,
              int64_t budget, int64_t workers, const std::string& out_prefix) {
    LoadedModel lm = load_model(ckpt);
    ImageU8 image = read_ppm(image_path);
    LabelMap gt = read_pgm(gt_path);
    InferOptions base;
    base.budget_bytes = budget;
    base.workers = workers;
    auto rows = uhrseg::run_bench(image, gt, lm, patches, base);

    nlohmann::json js = nlohmann::json::array();
    std::ostringstream csv;
    csv << "patch,miou,measured_peak_bytes,estimated_peak_bytes,wall_time_sec\n";
    for (const auto& r : rows) {
        js.push_back({{"patch", r.patch},
                      {"miou", r.miou},
                      {"measured_peak_bytes", r.measured_peak_bytes},
                      {"estimated_peak_bytes", r.estimated_peak_bytes},
                      {"wall_time_sec", r.wall_time_sec}});
        csv << r.patch << "," << r.miou << "," << r.measured_peak_bytes << ","
            << r.estimated_peak_bytes << "," << r.wall_time_sec << "\n";
    }
    {
        std::ofstream f(out_prefix + ".json");
        if (!f) throw IoError("bench: cannot write " + out_prefix + ".json");
        f << js.dump(2) << "\n";
    }
    {
        std::ofstream f(out_prefix + ".csv");
        if (!f) throw IoError("bench: cannot write " + out_prefix + ".csv");
        f << csv.str();
    }
    std::cout << js.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"memory-budgeted ultra-high-resolution segmentation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen", "generate a synthetic scene dataset");
    std::string gen_out;
    int64_t gen_scenes = 16, gen_size = 512, gen_classes = 8;
    uint64_t gen_seed = 1234;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--scenes", gen_scenes, "number of scenes");
    gen->add_option("--size", gen_size, "scene side length");
    gen->add_option("--classes", gen_classes, "number of classes");
    gen->add_option("--seed", gen_seed, "generator seed");

    auto* tr = app.add_subcommand("train", "train from a JSON run config");
    std::string tr_config, tr_out;
    tr->add_option("--config", tr_config, "run config JSON")->required();
    tr->add_option("--out", tr_out, "output directory")->required();

    auto* inf = app.add_subcommand("infer", "segment a PPM image");
    std::string inf_ckpt, inf_image, inf_mode = "local", inf_out, inf_report;
    int64_t inf_patch = 128, inf_overlap = -1, inf_chunk = 0, inf_workers = 1;
    int64_t inf_budget = 512ll * 1024 * 1024, inf_target = 512;
    inf->add_option("--ckpt", inf_ckpt, "checkpoint file")->required();
    inf->add_option("--image", inf_image, "input PPM")->required();
    inf->add_option("--mode", inf_mode, "local|global");
    inf->add_option("--patch", inf_patch, "patch size (local mode)");
    inf->add_option("--overlap", inf_overlap, "patch overlap, default patch/16");
    inf->add_option("--budget", inf_budget, "memory budget in bytes");
    inf->add_option("--chunk-rows", inf_chunk, "query chunk rows, 0 = auto");
    inf->add_option("--workers", inf_workers, "patch worker threads");
    inf->add_option("--target-side", inf_target, "global-mode downscale bound");
    inf->add_option("--out", inf_out, "output label PGM")->required();
    inf->add_option("--report", inf_report, "memory report JSON path");

    auto* ev = app.add_subcommand("eval", "mIoU of a prediction against ground truth");
    std::string ev_pred, ev_gt;
    int64_t ev_classes = 8;
    ev->add_option("--pred", ev_pred, "predicted PGM")->required();
    ev->add_option("--gt", ev_gt, "ground-truth PGM")->required();
    ev->add_option("--classes", ev_classes, "number of classes");

    auto* be = app.add_subcommand("bench", "patch-size sweep");
    std::string be_ckpt, be_image, be_gt, be_out = "bench";
    std::vector<int64_t> be_patches = {128, 96, 64};
    int64_t be_budget = 512ll * 1024 * 1024, be_workers = 1;
    be->add_option("--ckpt", be_ckpt, "checkpoint file")->required();
    be->add_option("--image", be_image, "input PPM")->required();
    be->add_option("--gt", be_gt, "ground-truth PGM")->required();
    be->add_option("--patches", be_patches, "patch sizes to sweep");
    be->add_option("--budget", be_budget, "memory budget in bytes");
    be->add_option("--workers", be_workers, "patch worker threads");
    be->add_option("--out", be_out, "output prefix for .json/.csv");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return run_gen(gen_out, gen_scenes, gen_size, gen_classes, gen_seed);
        if (tr->parsed()) return run_train(tr_config, tr_out);
        if (inf->parsed()) {
            if (inf_mode != "local" && inf_mode != "global") {
                throw ConfigError("infer: --mode must be local or global");
            }
            return run_infer(inf_ckpt, inf_image, inf_mode, inf_patch, inf_overlap,
                             inf_budget, inf_chunk, inf_workers, inf_target, inf_out,
                             inf_report);
        }
        if (ev->parsed()) return run_eval(ev_pred, ev_gt, ev_classes);
        if (be->parsed()) {
            return run_bench(be_ckpt, be_image, be_gt, be_patches, be_budget, be_workers,
                             be_out);
        }
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const BudgetError& e) {
        std::cerr << "budget error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 5;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
