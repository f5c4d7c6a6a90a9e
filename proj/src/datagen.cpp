#include "cgfr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "cgfr/common.hpp"

namespace cgfr {

// ---------------------------------------------------------------------------
// Attribute schema
// ---------------------------------------------------------------------------

namespace {

std::vector<AttributeDef> make_schema() {
    auto paired = [](std::string name, std::vector<std::vector<std::string>> phrases) {
        AttributeDef d;
        d.name = std::move(name);
        d.kind = kPairedAttr;
        for (auto& p : phrases) {
            d.values.push_back(p.size() > 1 ? p[0] + "_" + p[1] : p[0]);
            d.phrases.push_back(std::move(p));
        }
        return d;
    };
    auto words = [](std::string name, AttrKind kind, std::vector<std::string> values) {
        AttributeDef d;
        d.name = std::move(name);
        d.kind = kind;
        for (auto& v : values) {
            d.phrases.push_back({v});
            d.values.push_back(std::move(v));
        }
        return d;
    };

    std::vector<AttributeDef> schema;
    schema.push_back(words("gender", kGenderAttr, {"woman", "man"}));
    schema.push_back(words("age", kOpenerAttr, {"young", "adult", "elderly"}));
    schema.push_back(words("build", kOpenerAttr, {"slim", "chubby"}));
    schema.push_back(words("impression", kOpenerAttr, {"ordinary", "attractive"}));
    schema.push_back(words("expression", kOpenerAttr, {"serious", "smiling"}));
    schema.push_back(words("hair_length", kHairPartAttr, {"short", "long"}));
    schema.push_back(words("hair_color", kHairPartAttr, {"blond", "black", "brown", "gray", "red"}));
    schema.push_back(words("hair_texture", kHairPartAttr, {"straight", "wavy", "curly"}));
    schema.push_back(paired("hairline", {{"receding", "hairline"}, {"rounded", "hairline"}}));
    schema.push_back(paired("bangs", {{"no", "bangs"}, {"blunt", "bangs"}}));
    schema.push_back(paired("eyebrows",
                            {{"arched", "eyebrows"}, {"bushy", "eyebrows"}, {"thin", "eyebrows"}}));
    schema.push_back(paired("eye_shape", {{"narrow", "eyes"}, {"wide", "eyes"}}));
    schema.push_back(paired("eye_color", {{"dark", "eyes"}, {"hazel", "eyes"}, {"blue", "eyes"},
                                          {"green", "eyes"}}));
    schema.push_back(paired("eye_bags", {{"rested", "eyes"}, {"puffy", "eyes"}}));
    schema.push_back(paired("nose", {{"pointy", "nose"}, {"big", "nose"}, {"small", "nose"}}));
    schema.push_back(paired("ears", {{"small", "ears"}, {"big", "ears"}}));
    schema.push_back(paired("lips", {{"full", "lips"}, {"thin", "lips"}}));
    schema.push_back(paired("face_shape", {{"oval", "face"}, {"round", "face"}, {"square", "face"}}));
    schema.push_back(paired("cheekbones", {{"high", "cheekbones"}, {"flat", "cheekbones"}}));
    schema.push_back(paired("cheeks", {{"plain", "cheeks"}, {"rosy", "cheeks"}}));
    schema.push_back(paired("chin", {{"pointed", "chin"}, {"double", "chin"}}));
    schema.push_back(paired("skin", {{"pale", "skin"}, {"tanned", "skin"}, {"fair", "skin"}}));
    schema.push_back(paired("forehead", {{"broad", "forehead"}, {"narrow", "forehead"}}));
    schema.push_back(paired("jaw", {{"strong", "jaw"}, {"soft", "jaw"}}));
    schema.push_back(paired("wrinkles", {{"no", "wrinkles"}, {"visible", "wrinkles"}}));
    schema.push_back(paired("freckles", {{"no", "freckles"}, {"many", "freckles"}}));
    schema.push_back(paired("dimples", {{"no", "dimples"}, {"deep", "dimples"}}));
    schema.push_back(paired("mole", {{"no", "mole"}, {"a", "mole"}}));
    schema.push_back(paired("beard", {{"no", "beard"}, {"a", "beard"}, {"a", "goatee"}}));
    schema.push_back(paired("mustache", {{"no", "mustache"}, {"a", "mustache"}}));
    schema.push_back(paired("sideburns", {{"no", "sideburns"}, {"bushy", "sideburns"}}));
    schema.push_back(paired("glasses", {{"no", "glasses"}, {"eyeglasses"}, {"sunglasses"}}));
    schema.push_back(paired("makeup", {{"no", "makeup"}, {"heavy", "makeup"}}));
    schema.push_back(paired("lipstick", {{"no", "lipstick"}, {"bright", "lipstick"}}));
    schema.push_back(paired("earrings", {{"no", "earrings"}, {"shiny", "earrings"}}));
    schema.push_back(paired("hat", {{"no", "hat"}, {"a", "hat"}}));
    schema.push_back(paired("necklace", {{"no", "necklace"}, {"a", "necklace"}}));
    schema.push_back(paired("necktie", {{"no", "necktie"}, {"a", "necktie"}}));
    return schema;
}

// Attribute indices used by the renderer and caption builder.
enum AttrIndex {
    aGender = 0, aAge, aBuild, aImpression, aExpression,
    aHairLength, aHairColor, aHairTexture, aHairline, aBangs,
    aEyebrows, aEyeShape, aEyeColor, aEyeBags, aNose, aEars, aLips,
    aFaceShape, aCheekbones, aCheeks, aChin, aSkin, aForehead, aJaw,
    aWrinkles, aFreckles, aDimples, aMole, aBeard, aMustache, aSideburns,
    aGlasses, aMakeup, aLipstick, aEarrings, aHat, aNecklace, aNecktie,
};

}  // namespace

const std::vector<AttributeDef>& attribute_schema() {
    static const std::vector<AttributeDef> schema = make_schema();
    return schema;
}

std::vector<std::string> grammar_words() {
    std::vector<std::string> out = {"this", "person", "has", "hair", "and"};
    std::set<std::string> seen(out.begin(), out.end());
    for (const AttributeDef& attr : attribute_schema()) {
        for (const auto& phrase : attr.phrases) {
            for (const std::string& w : phrase) {
                if (seen.insert(w).second) out.push_back(w);
            }
        }
    }
    return out;
}

IdentityRecord generate_identity(std::uint64_t seed, int id) {
    IdentityRecord rec;
    rec.id = id;
    Rng rng = Rng(seed).fork(0x1D5A11ull + static_cast<std::uint64_t>(id));
    const auto& schema = attribute_schema();
    for (int a = 0; a < kNumAttributes; ++a) {
        rec.attributes[a] =
            static_cast<std::uint8_t>(rng.uniform_int(static_cast<int>(schema[a].values.size())));
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

constexpr int kImg = 112;

struct Canvas {
    std::vector<double> px;  // 3 planes, row-major
    Canvas() : px(3 * kImg * kImg, 0.0) {}
    void blend(int x, int y, const double rgb[3], double alpha) {
        if (x < 0 || x >= kImg || y < 0 || y >= kImg) return;
        for (int c = 0; c < 3; ++c) {
            double& p = px[(c * kImg + y) * kImg + x];
            p = p * (1.0 - alpha) + rgb[c] * alpha;
        }
    }
};

void fill_gradient(Canvas& cv, const double top[3], const double bottom[3]) {
    for (int y = 0; y < kImg; ++y) {
        double t = static_cast<double>(y) / (kImg - 1);
        double rgb[3] = {top[0] + (bottom[0] - top[0]) * t, top[1] + (bottom[1] - top[1]) * t,
                         top[2] + (bottom[2] - top[2]) * t};
        for (int x = 0; x < kImg; ++x) cv.blend(x, y, rgb, 1.0);
    }
}

// Superellipse |dx/rx|^e + |dy/ry|^e <= 1.
void fill_shape(Canvas& cv, double cx, double cy, double rx, double ry, double expo,
                const double rgb[3], double alpha = 1.0) {
    int x0 = std::max(0, static_cast<int>(cx - rx - 1));
    int x1 = std::min(kImg - 1, static_cast<int>(cx + rx + 1));
    int y0 = std::max(0, static_cast<int>(cy - ry - 1));
    int y1 = std::min(kImg - 1, static_cast<int>(cy + ry + 1));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            double dx = std::abs((x - cx) / rx);
            double dy = std::abs((y - cy) / ry);
            if (std::pow(dx, expo) + std::pow(dy, expo) <= 1.0) cv.blend(x, y, rgb, alpha);
        }
    }
}

void fill_rect(Canvas& cv, int x0, int y0, int x1, int y1, const double rgb[3],
               double alpha = 1.0) {
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) cv.blend(x, y, rgb, alpha);
}

}  // namespace

Tensor render_image(const IdentityRecord& rec, const Nuisance& nu, std::uint64_t seed) {
    const auto& A = rec.attributes;
    Canvas cv;
    Rng bg_rng = Rng(seed).fork(0xBA5Eull);
    Rng id_rng = Rng(0x1DC0FFEEull).fork(static_cast<std::uint64_t>(rec.id));

    // Background gradient; hue varies per image, mildly.
    double top[3], bottom[3];
    for (int c = 0; c < 3; ++c) {
        top[c] = 0.25 + 0.35 * bg_rng.uniform();
        bottom[c] = top[c] * 0.55;
    }
    fill_gradient(cv, top, bottom);

    double cx = 56.0 + 6.0 * nu.pose;
    double cy = 58.0;

    // Face geometry from shape attributes, with a stable per-identity jitter.
    double rx = 30, ry = 44, expo = 2.0;
    if (A[aFaceShape] == 1) { rx = 36; ry = 40; }
    if (A[aFaceShape] == 2) { rx = 33; ry = 42; expo = 4.0; }
    rx += id_rng.uniform(-1.5, 1.5);
    ry += id_rng.uniform(-1.5, 1.5);
    if (A[aGender] == 1) rx += 3;
    if (A[aBuild] == 1) { rx += 3; ry += 1; }

    double skin[3];
    switch (A[aSkin]) {
        case 0: skin[0] = 0.94; skin[1] = 0.87; skin[2] = 0.81; break;
        case 1: skin[0] = 0.72; skin[1] = 0.55; skin[2] = 0.38; break;
        default: skin[0] = 0.98; skin[1] = 0.83; skin[2] = 0.72; break;
    }
    for (int c = 0; c < 3; ++c) skin[c] = std::clamp(skin[c] + id_rng.uniform(-0.03, 0.03), 0.0, 1.0);
    if (A[aAge] == 2) {
        for (int c = 0; c < 3; ++c) skin[c] = 0.85 * skin[c] + 0.15 * 0.7;
    }

    double face_top = cy - ry;
    double face_bottom = cy + ry;

    // Ears behind the face.
    double ear_r = A[aEars] == 1 ? 5.5 : 3.5;
    fill_shape(cv, cx - rx, cy, ear_r, ear_r + 2, 2.0, skin);
    fill_shape(cv, cx + rx, cy, ear_r, ear_r + 2, 2.0, skin);

    fill_shape(cv, cx, cy, rx, ry, expo, skin);

    // Hair region: cap above the hairline, longer variants flow down the
    // sides; texture modulates the lower edge.
    double hair[3];
    switch (A[aHairColor]) {
        case 0: hair[0] = 0.85; hair[1] = 0.72; hair[2] = 0.45; break;
        case 1: hair[0] = 0.10; hair[1] = 0.10; hair[2] = 0.12; break;
        case 2: hair[0] = 0.42; hair[1] = 0.28; hair[2] = 0.18; break;
        case 3: hair[0] = 0.65; hair[1] = 0.65; hair[2] = 0.66; break;
        default: hair[0] = 0.55; hair[1] = 0.22; hair[2] = 0.12; break;
    }
    if (A[aAge] == 2) {
        for (int c = 0; c < 3; ++c) hair[c] = 0.6 * hair[c] + 0.4 * 0.75;
    }
    double hairline = face_top + (A[aForehead] == 0 ? 18.0 : 12.0);
    if (A[aHairline] == 0) hairline -= 7.0;  // receding
    for (int x = 0; x < kImg; ++x) {
        double wave = 0.0;
        if (A[aHairTexture] == 1) wave = 3.0 * std::sin(0.45 * x);
        if (A[aHairTexture] == 2) wave = 2.0 * std::sin(1.3 * x) + 2.0 * std::sin(0.7 * x);
        double dxn = std::abs((x - cx) / (rx + 4.0));
        if (dxn > 1.0) continue;
        double cap_top = cy - (ry + 5.0) * std::sqrt(std::max(0.0, 1.0 - dxn * dxn));
        double edge = hairline + wave;
        if (A[aHairline] == 0 && std::abs(x - cx) < 8) edge = hairline + 9;  // notch
        for (int y = std::max(0, static_cast<int>(cap_top)); y < edge && y < kImg; ++y) {
            cv.blend(x, y, hair, 1.0);
        }
    }
    if (A[aHairLength] == 1) {  // long: side falls
        int fall = static_cast<int>(cy + 34);
        fill_rect(cv, static_cast<int>(cx - rx - 7), static_cast<int>(face_top + 10),
                  static_cast<int>(cx - rx + 2), fall, hair);
        fill_rect(cv, static_cast<int>(cx + rx - 2), static_cast<int>(face_top + 10),
                  static_cast<int>(cx + rx + 7), fall, hair);
    }
    if (A[aBangs] == 1) {
        fill_rect(cv, static_cast<int>(cx - rx * 0.7), static_cast<int>(face_top + 2),
                  static_cast<int>(cx + rx * 0.7), static_cast<int>(face_top + 22), hair);
    }
    if (A[aSideburns] == 1) {
        fill_rect(cv, static_cast<int>(cx - rx), static_cast<int>(cy - 10),
                  static_cast<int>(cx - rx + 4), static_cast<int>(cy + 16), hair);
        fill_rect(cv, static_cast<int>(cx + rx - 4), static_cast<int>(cy - 10),
                  static_cast<int>(cx + rx), static_cast<int>(cy + 16), hair);
    }

    // Eyes.
    double eye_dx = 13.0, eye_y = cy - 8.0;
    double pupil_shift = 2.5 * nu.pose;
    double aperture = A[aEyeShape] == 0 ? 2.2 : 4.2;
    double white[3] = {0.97, 0.97, 0.95};
    double iris[3];
    switch (A[aEyeColor]) {
        case 0: iris[0] = 0.16; iris[1] = 0.11; iris[2] = 0.08; break;
        case 1: iris[0] = 0.45; iris[1] = 0.32; iris[2] = 0.15; break;
        case 2: iris[0] = 0.25; iris[1] = 0.40; iris[2] = 0.70; break;
        default: iris[0] = 0.25; iris[1] = 0.50; iris[2] = 0.30; break;
    }
    double dark[3] = {0.12, 0.10, 0.10};
    for (int side = -1; side <= 1; side += 2) {
        double ex = cx + side * eye_dx;
        if (A[aMakeup] == 1) fill_shape(cv, ex, eye_y, 7.0, aperture + 1.5, 2.0, dark);
        fill_shape(cv, ex, eye_y, 6.0, aperture, 2.0, white);
        fill_shape(cv, ex + pupil_shift, eye_y, 2.4, std::min(aperture, 2.4), 2.0, iris);
        if (A[aEyeBags] == 1) {
            double bag[3] = {skin[0] * 0.7, skin[1] * 0.7, skin[2] * 0.75};
            fill_rect(cv, static_cast<int>(ex - 5), static_cast<int>(eye_y + aperture + 1),
                      static_cast<int>(ex + 5), static_cast<int>(eye_y + aperture + 3), bag, 0.8);
        }
    }

    // Eyebrows.
    double brow[3] = {hair[0] * 0.7, hair[1] * 0.7, hair[2] * 0.7};
    int brow_y = static_cast<int>(cy - 17);
    int brow_h = A[aEyebrows] == 1 ? 3 : (A[aEyebrows] == 2 ? 1 : 2);
    for (int side = -1; side <= 1; side += 2) {
        int bx = static_cast<int>(cx + side * eye_dx);
        if (A[aEyebrows] == 0) {  // arched: raised center
            fill_rect(cv, bx - 6, brow_y, bx - 2, brow_y + brow_h, brow);
            fill_rect(cv, bx - 2, brow_y - 2, bx + 2, brow_y - 2 + brow_h, brow);
            fill_rect(cv, bx + 2, brow_y, bx + 6, brow_y + brow_h, brow);
        } else {
            fill_rect(cv, bx - 6, brow_y, bx + 6, brow_y + brow_h, brow);
        }
    }

    // Nose.
    double nose_shade[3] = {skin[0] * 0.82, skin[1] * 0.82, skin[2] * 0.82};
    double nw = A[aNose] == 0 ? 3.0 : (A[aNose] == 1 ? 7.0 : 4.0);
    double nh = A[aNose] == 2 ? 8.0 : 13.0;
    for (int y = 0; y <= static_cast<int>(nh); ++y) {
        double half = nw * (static_cast<double>(y) / nh);
        fill_rect(cv, static_cast<int>(cx - half), static_cast<int>(cy - 4 + y),
                  static_cast<int>(cx + half), static_cast<int>(cy - 4 + y), nose_shade);
    }

    // Mouth: expression glyph, thickness by lips, color by lipstick.
    double mouth_y = cy + 22;
    double lip[3];
    if (A[aLipstick] == 1) { lip[0] = 0.80; lip[1] = 0.15; lip[2] = 0.20; }
    else { lip[0] = 0.62; lip[1] = 0.35; lip[2] = 0.32; }
    double lip_h = A[aLips] == 0 ? 2.6 : 1.2;
    int expr = nu.expression;
    if (A[aExpression] == 1 && expr == 0) expr = 1;  // smiling identities smile
    if (expr == 2) {
        double mouth_dark[3] = {0.25, 0.10, 0.10};
        fill_shape(cv, cx, mouth_y, 9.0, 4.5, 2.0, mouth_dark);
        fill_shape(cv, cx, mouth_y - 4, 9.0, lip_h, 2.0, lip);
        fill_shape(cv, cx, mouth_y + 4, 9.0, lip_h, 2.0, lip);
    } else {
        for (int dx = -9; dx <= 9; ++dx) {
            double curve = expr == 1 ? -0.09 * (81 - dx * dx) * 0.35 : 0.0;
            fill_rect(cv, static_cast<int>(cx + dx), static_cast<int>(mouth_y + curve),
                      static_cast<int>(cx + dx), static_cast<int>(mouth_y + curve + 2 * lip_h),
                      lip);
        }
    }

    // Facial hair.
    double beard_c[3] = {hair[0] * 0.5, hair[1] * 0.5, hair[2] * 0.5};
    if (A[aBeard] == 1) {
        fill_shape(cv, cx, face_bottom - 12, rx * 0.8, 12.0, 2.0, beard_c, 0.75);
    } else if (A[aBeard] == 2) {  // goatee
        fill_shape(cv, cx, face_bottom - 8, 7.0, 8.0, 2.0, beard_c, 0.85);
    }
    if (A[aMustache] == 1) {
        fill_rect(cv, static_cast<int>(cx - 9), static_cast<int>(mouth_y - 7),
                  static_cast<int>(cx + 9), static_cast<int>(mouth_y - 4), beard_c, 0.9);
    }

    // Cheek features.
    if (A[aCheeks] == 1) {
        double rosy[3] = {0.92, 0.45, 0.45};
        fill_shape(cv, cx - 19, cy + 7, 5.0, 4.0, 2.0, rosy, 0.45);
        fill_shape(cv, cx + 19, cy + 7, 5.0, 4.0, 2.0, rosy, 0.45);
    }
    if (A[aCheekbones] == 0) {  // high: light streaks
        double hi[3] = {std::min(1.0, skin[0] * 1.18), std::min(1.0, skin[1] * 1.18),
                        std::min(1.0, skin[2] * 1.18)};
        fill_rect(cv, static_cast<int>(cx - 24), static_cast<int>(cy + 1),
                  static_cast<int>(cx - 12), static_cast<int>(cy + 3), hi, 0.8);
        fill_rect(cv, static_cast<int>(cx + 12), static_cast<int>(cy + 1),
                  static_cast<int>(cx + 24), static_cast<int>(cy + 3), hi, 0.8);
    }
    if (A[aFreckles] == 1) {
        double fr[3] = {skin[0] * 0.6, skin[1] * 0.55, skin[2] * 0.5};
        Rng frng = id_rng.fork(7);
        for (int i = 0; i < 14; ++i) {
            double fx = cx + frng.uniform(-24, 24);
            double fy = cy + frng.uniform(4, 16);
            fill_shape(cv, fx, fy, 0.9, 0.9, 2.0, fr);
        }
    }
    if (A[aDimples] == 1) {
        double dp[3] = {skin[0] * 0.65, skin[1] * 0.65, skin[2] * 0.65};
        fill_shape(cv, cx - 13, mouth_y - 1, 1.3, 1.8, 2.0, dp);
        fill_shape(cv, cx + 13, mouth_y - 1, 1.3, 1.8, 2.0, dp);
    }
    if (A[aMole] == 1) {
        double mc[3] = {0.20, 0.12, 0.10};
        fill_shape(cv, cx + 17, cy + 12, 1.4, 1.4, 2.0, mc);
    }
    if (A[aWrinkles] == 1) {
        double wr[3] = {skin[0] * 0.72, skin[1] * 0.72, skin[2] * 0.72};
        int fy = static_cast<int>(hairline + 4);
        fill_rect(cv, static_cast<int>(cx - 14), fy, static_cast<int>(cx + 14), fy, wr, 0.85);
        fill_rect(cv, static_cast<int>(cx - 12), fy + 4, static_cast<int>(cx + 12), fy + 4, wr, 0.85);
    }
    if (A[aChin] == 1) {  // double chin arc
        double dc[3] = {skin[0] * 0.8, skin[1] * 0.8, skin[2] * 0.8};
        fill_rect(cv, static_cast<int>(cx - 10), static_cast<int>(face_bottom - 4),
                  static_cast<int>(cx + 10), static_cast<int>(face_bottom - 3), dc);
    }
    if (A[aJaw] == 0) {  // strong
        double jc[3] = {skin[0] * 0.75, skin[1] * 0.75, skin[2] * 0.75};
        fill_rect(cv, static_cast<int>(cx - rx * 0.75), static_cast<int>(face_bottom - 10),
                  static_cast<int>(cx - rx * 0.75 + 3), static_cast<int>(face_bottom - 2), jc, 0.6);
        fill_rect(cv, static_cast<int>(cx + rx * 0.75 - 3), static_cast<int>(face_bottom - 10),
                  static_cast<int>(cx + rx * 0.75), static_cast<int>(face_bottom - 2), jc, 0.6);
    }

    // Glasses.
    if (A[aGlasses] == 1 || A[aGlasses] == 2) {
        double fr[3] = {0.10, 0.10, 0.12};
        for (int side = -1; side <= 1; side += 2) {
            double ex = cx + side * eye_dx;
            if (A[aGlasses] == 2) {
                fill_shape(cv, ex, eye_y, 8.0, 6.0, 2.0, fr, 0.92);
            } else {
                for (int y = static_cast<int>(eye_y - 6); y <= static_cast<int>(eye_y + 6); ++y) {
                    for (int x = static_cast<int>(ex - 8); x <= static_cast<int>(ex + 8); ++x) {
                        double d = std::sqrt((x - ex) * (x - ex) + (y - eye_y) * (y - eye_y));
                        if (d > 6.5 && d < 8.0) cv.blend(x, y, fr, 1.0);
                    }
                }
            }
        }
        fill_rect(cv, static_cast<int>(cx - 5), static_cast<int>(eye_y - 1),
                  static_cast<int>(cx + 5), static_cast<int>(eye_y), fr);
    }

    // Headwear and jewelry.
    if (A[aHat] == 1) {
        double hc[3] = {0.20, 0.22, 0.48};
        fill_rect(cv, static_cast<int>(cx - rx - 8), static_cast<int>(face_top - 12),
                  static_cast<int>(cx + rx + 8), static_cast<int>(face_top + 4), hc);
    }
    if (A[aEarrings] == 1) {
        double gold[3] = {0.95, 0.88, 0.30};
        fill_shape(cv, cx - rx - 1, cy + ear_r + 2, 1.8, 1.8, 2.0, gold);
        fill_shape(cv, cx + rx + 1, cy + ear_r + 2, 1.8, 1.8, 2.0, gold);
    }
    if (A[aNecklace] == 1) {
        double silver[3] = {0.85, 0.88, 0.92};
        for (int dx = -12; dx <= 12; dx += 4) {
            fill_shape(cv, cx + dx, face_bottom + 8 + 0.02 * dx * dx, 1.4, 1.4, 2.0, silver);
        }
    }
    if (A[aNecktie] == 1) {
        double tie[3] = {0.45, 0.10, 0.14};
        for (int y = static_cast<int>(face_bottom + 4); y < kImg; ++y) {
            int half = 3 + (y - static_cast<int>(face_bottom)) / 8;
            fill_rect(cv, static_cast<int>(cx - half), y, static_cast<int>(cx + half), y, tie);
        }
    }

    // Illumination gain and clamp.
    for (double& p : cv.px) p = std::clamp(p * nu.gain, 0.0, 1.0);
    return Tensor::from_vector({3, kImg, kImg}, std::move(cv.px));
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> realize_caption(const IdentityRecord& rec,
                                         const std::vector<int>& subset) {
    const auto& schema = attribute_schema();
    auto in_subset = [&](int a) {
        return std::find(subset.begin(), subset.end(), a) != subset.end();
    };

    std::vector<std::string> words = {"this"};
    for (int a : {aAge, aBuild, aImpression, aExpression}) {
        if (in_subset(a)) words.push_back(schema[a].phrases[rec.attributes[a]][0]);
    }
    words.push_back(in_subset(aGender) ? schema[aGender].phrases[rec.attributes[aGender]][0]
                                       : "person");

    std::vector<std::vector<std::string>> clauses;
    std::vector<std::string> hair_clause;
    for (int a : {aHairLength, aHairColor, aHairTexture}) {
        if (in_subset(a)) hair_clause.push_back(schema[a].phrases[rec.attributes[a]][0]);
    }
    if (!hair_clause.empty()) {
        hair_clause.push_back("hair");
        clauses.push_back(std::move(hair_clause));
    }
    for (int a : subset) {
        if (a >= aHairline) clauses.push_back(schema[a].phrases[rec.attributes[a]]);
    }

    if (!clauses.empty()) {
        words.push_back("has");
        std::size_t count = words.size();
        for (const auto& c : clauses) count += c.size();
        bool with_and = clauses.size() >= 2 && count + 1 <= 19;
        for (std::size_t i = 0; i < clauses.size(); ++i) {
            if (with_and && i + 1 == clauses.size()) words.push_back("and");
            words.insert(words.end(), clauses[i].begin(), clauses[i].end());
        }
    }
    return words;
}

std::string join_caption(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out.push_back(' ');
        out += words[i];
    }
    out.push_back('.');
    return out;
}

}  // namespace

std::vector<std::string> generate_captions(const IdentityRecord& rec, std::uint64_t seed, int n,
                                           int min_attrs, int max_attrs,
                                           std::vector<std::vector<int>>* mentioned) {
    if (n < 1 || n > 10) throw InputError("captions per image must be in [1, 10]");
    if (min_attrs < 3) min_attrs = 3;
    if (max_attrs > 8) max_attrs = 8;
    if (max_attrs < min_attrs) max_attrs = min_attrs;

    std::vector<std::string> captions;
    std::vector<std::vector<int>> used_subsets;
    for (int ci = 0; ci < n; ++ci) {
        std::string caption;
        std::vector<int> subset;
        for (int attempt = 0; attempt < 16; ++attempt) {
            Rng rng = Rng(seed).fork(0xCA9ull + 131 * static_cast<std::uint64_t>(ci) + attempt);
            int n_attr = min_attrs + rng.uniform_int(max_attrs - min_attrs + 1);
            std::vector<int> all(kNumAttributes);
            for (int i = 0; i < kNumAttributes; ++i) all[i] = i;
            rng.shuffle(all);
            subset.assign(all.begin(), all.begin() + n_attr);
            std::sort(subset.begin(), subset.end());
            caption = join_caption(realize_caption(rec, subset));
            if (std::find(captions.begin(), captions.end(), caption) == captions.end()) break;
        }
        captions.push_back(std::move(caption));
        used_subsets.push_back(std::move(subset));
    }
    if (mentioned) *mentioned = std::move(used_subsets);
    return captions;
}

// ---------------------------------------------------------------------------
// Degradation
// ---------------------------------------------------------------------------

DegradeConfig DegradeConfig::strong() {
    DegradeConfig cfg;
    cfg.subsample_min = 2.0;
    cfg.subsample_max = 4.0;
    cfg.rotation_deg = 10.0;
    cfg.flip_prob = 0.5;
    cfg.noise_sigma = 0.08;
    cfg.brightness = 0.2;
    cfg.contrast = 0.2;
    cfg.saturation = 0.2;
    return cfg;
}

namespace {

std::vector<double> bilinear_resize(const std::vector<double>& src, int c, int h, int w, int oh,
                                    int ow) {
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
    double sy = oh > 1 ? static_cast<double>(h - 1) / (oh - 1) : 0.0;
    double sx = ow > 1 ? static_cast<double>(w - 1) / (ow - 1) : 0.0;
    for (int ci = 0; ci < c; ++ci) {
        const double* plane = src.data() + static_cast<std::size_t>(ci) * h * w;
        double* op = out.data() + static_cast<std::size_t>(ci) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            double fy = y * sy;
            int y0 = static_cast<int>(fy);
            int y1 = std::min(y0 + 1, h - 1);
            double ty = fy - y0;
            for (int x = 0; x < ow; ++x) {
                double fx = x * sx;
                int x0 = static_cast<int>(fx);
                int x1 = std::min(x0 + 1, w - 1);
                double tx = fx - x0;
                double v = (1 - ty) * ((1 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1]) +
                           ty * ((1 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1]);
                op[y * ow + x] = v;
            }
        }
    }
    return out;
}

}  // namespace

Tensor degrade(const Tensor& image, const DegradeConfig& cfg, std::uint64_t seed) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("degrade: expected [3 x H x W], got " + shape_str(image.dims()));
    }
    int h = image.dim(1), w = image.dim(2);
    Rng rng(seed);
    // All parameters are drawn up front, in a fixed order.
    double factor = rng.uniform(cfg.subsample_min, cfg.subsample_max);
    double bright = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness);
    double contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
    double saturation = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation);
    bool flip = rng.bernoulli(cfg.flip_prob);
    double angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * std::numbers::pi / 180.0;

    std::vector<double> px(image.data().begin(), image.data().end());

    if (factor > 1.0) {
        int dh = std::max(8, static_cast<int>(std::lround(h / factor)));
        int dw = std::max(8, static_cast<int>(std::lround(w / factor)));
        px = bilinear_resize(bilinear_resize(px, 3, h, w, dh, dw), 3, dh, dw, h, w);
    }

    if (bright != 1.0) {
        for (double& v : px) v *= bright;
    }
    if (contrast != 1.0) {
        double mean = 0.0;
        for (double v : px) mean += v;
        mean /= px.size();
        for (double& v : px) v = mean + (v - mean) * contrast;
    }
    if (saturation != 1.0) {
        std::size_t plane = static_cast<std::size_t>(h) * w;
        for (std::size_t i = 0; i < plane; ++i) {
            double luma = 0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i];
            for (int c = 0; c < 3; ++c) {
                px[c * plane + i] = luma + (px[c * plane + i] - luma) * saturation;
            }
        }
    }

    if (flip) {
        for (int c = 0; c < 3; ++c) {
            double* plane = px.data() + static_cast<std::size_t>(c) * h * w;
            for (int y = 0; y < h; ++y) {
                double* rp = plane + static_cast<std::size_t>(y) * w;
                std::reverse(rp, rp + w);
            }
        }
    }

    if (angle != 0.0) {
        std::vector<double> rotated(px.size(), 0.0);
        double cs = std::cos(angle), sn = std::sin(angle);
        double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
        for (int c = 0; c < 3; ++c) {
            const double* plane = px.data() + static_cast<std::size_t>(c) * h * w;
            double* op = rotated.data() + static_cast<std::size_t>(c) * h * w;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    double sx = cs * (x - cx) + sn * (y - cy) + cx;
                    double sy = -sn * (x - cx) + cs * (y - cy) + cy;
                    int x0 = static_cast<int>(std::floor(sx));
                    int y0 = static_cast<int>(std::floor(sy));
                    double tx = sx - x0, ty = sy - y0;
                    double acc = 0.0;
                    for (int dy = 0; dy <= 1; ++dy) {
                        for (int dx = 0; dx <= 1; ++dx) {
                            int xi = x0 + dx, yi = y0 + dy;
                            if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
                            double wgt = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty);
                            acc += wgt * plane[yi * w + xi];
                        }
                    }
                    op[y * w + x] = acc;
                }
            }
        }
        px = std::move(rotated);
    }

    if (cfg.noise_sigma > 0.0) {
        for (double& v : px) v += cfg.noise_sigma * rng.normal();
    }

    for (double& v : px) v = std::clamp(v, 0.0, 1.0);
    return Tensor::from_vector({3, h, w}, std::move(px));
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

DataConfig DataConfig::from_run_config(const RunConfig& cfg) {
    DataConfig d;
    d.n_identities = cfg.get_i("data.n_identities");
    d.images_per_identity = cfg.get_i("data.images_per_identity");
    d.captions_per_image = cfg.get_i("data.captions_per_image");
    d.min_caption_attributes = cfg.get_i("data.min_caption_attributes");
    d.max_caption_attributes = cfg.get_i("data.max_caption_attributes");
    d.gallery_per_identity = cfg.get_i("data.gallery_per_identity");
    d.probe_per_identity = cfg.get_i("data.probe_per_identity");
    const std::string& split = cfg.get_s("data.split");
    if (split == "shared") d.identity_disjoint = false;
    else if (split == "disjoint") d.identity_disjoint = true;
    else throw ConfigError("data.split must be shared or disjoint");
    d.holdout_identities = cfg.get_i("data.holdout_identities");
    const std::string& preset = cfg.get_s("degrade.preset");
    if (preset == "strong") {
        d.degrade = DegradeConfig::strong();
    } else if (preset == "none") {
        d.degrade.subsample_min = cfg.get_f("degrade.subsample_min");
        d.degrade.subsample_max = cfg.get_f("degrade.subsample_max");
        d.degrade.rotation_deg = cfg.get_f("degrade.rotation_deg");
        d.degrade.flip_prob = cfg.get_f("degrade.flip_prob");
        d.degrade.noise_sigma = cfg.get_f("degrade.noise_sigma");
        d.degrade.brightness = cfg.get_f("degrade.brightness");
        d.degrade.contrast = cfg.get_f("degrade.contrast");
        d.degrade.saturation = cfg.get_f("degrade.saturation");
    } else {
        throw ConfigError("degrade.preset must be none or strong");
    }
    return d;
}

namespace {

void compute_splits(Dataset& ds, const DataConfig& cfg) {
    int ipi = cfg.images_per_identity;
    int g = cfg.gallery_per_identity, p = cfg.probe_per_identity;
    if (g < 0 || p < 0 || g + p > ipi) {
        throw ConfigError("split sizes exceed images per identity (" + std::to_string(g) + "+" +
                          std::to_string(p) + " > " + std::to_string(ipi) + ")");
    }
    int train_count = ipi - g - p;
    int eval_start = cfg.identity_disjoint ? cfg.n_identities - cfg.holdout_identities
                                           : 0;
    if (cfg.identity_disjoint &&
        (cfg.holdout_identities < 1 || cfg.holdout_identities >= cfg.n_identities)) {
        throw ConfigError("disjoint split needs 1 <= holdout_identities < n_identities");
    }
    for (int id = 0; id < cfg.n_identities; ++id) {
        int base = id * ipi;
        if (cfg.identity_disjoint) {
            if (id < eval_start) {
                for (int j = 0; j < ipi; ++j) ds.train_idx.push_back(base + j);
            } else {
                for (int j = 0; j < g; ++j) ds.gallery_idx.push_back(base + j);
                for (int j = g; j < g + p && j < ipi; ++j) ds.probe_idx.push_back(base + j);
            }
        } else {
            for (int j = 0; j < train_count; ++j) ds.train_idx.push_back(base + j);
            for (int j = train_count; j < train_count + g; ++j) ds.gallery_idx.push_back(base + j);
            for (int j = train_count + g; j < ipi; ++j) ds.probe_idx.push_back(base + j);
        }
    }
}

}  // namespace

Dataset build_dataset(const DataConfig& cfg, std::uint64_t seed) {
    if (cfg.n_identities < 1 || cfg.images_per_identity < 1 || cfg.captions_per_image < 1) {
        throw ConfigError("dataset counts must be >= 1");
    }
    Dataset ds;
    ds.n_identities = cfg.n_identities;
    ds.records.resize(static_cast<std::size_t>(cfg.n_identities));
    ds.samples.resize(static_cast<std::size_t>(cfg.n_identities) * cfg.images_per_identity);

    parallel_for(cfg.n_identities, [&](std::int64_t id) {
        IdentityRecord rec = generate_identity(seed, static_cast<int>(id));
        ds.records[static_cast<std::size_t>(id)] = rec;
        Rng id_rng = Rng(seed).fork(0x1111ull + static_cast<std::uint64_t>(id));
        for (int j = 0; j < cfg.images_per_identity; ++j) {
            Nuisance nu;
            nu.pose = id_rng.uniform(-1.0, 1.0);
            nu.gain = id_rng.uniform(0.75, 1.25);
            nu.expression = id_rng.uniform_int(3);
            std::uint64_t img_seed = id_rng.next_u64();
            Tensor img = render_image(rec, nu, img_seed);
            img = degrade(img, cfg.degrade, img_seed ^ 0xDE62ADEull);
            Sample& s = ds.samples[static_cast<std::size_t>(id) * cfg.images_per_identity + j];
            s.identity = static_cast<int>(id);
            s.image = img;
            s.captions = generate_captions(rec, img_seed ^ 0xCA93ull, cfg.captions_per_image,
                                           cfg.min_caption_attributes, cfg.max_caption_attributes);
        }
    });
    compute_splits(ds, cfg);
    return ds;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

namespace {

constexpr char kImgMagic[4] = {'C', 'G', 'I', 'M'};

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

}  // namespace

void write_image_cgim(const std::string& path, const Tensor& image) {
    if (image.rank() != 3) throw ShapeError("write_image_cgim: expected rank-3 image");
    std::string buf;
    buf.append(kImgMagic, 4);
    put_u16(buf, static_cast<std::uint16_t>(image.dim(0)));
    put_u16(buf, static_cast<std::uint16_t>(image.dim(1)));
    put_u16(buf, static_cast<std::uint16_t>(image.dim(2)));
    for (double v : image.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write image " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Tensor read_image_cgim(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 10 || std::memcmp(buf.data(), kImgMagic, 4) != 0) {
        throw IoError("not a CGIM image: " + path);
    }
    auto u16 = [&](std::size_t off) {
        return static_cast<int>(static_cast<std::uint8_t>(buf[off])) |
               (static_cast<int>(static_cast<std::uint8_t>(buf[off + 1])) << 8);
    };
    int c = u16(4), h = u16(6), w = u16(8);
    std::size_t need = 10 + static_cast<std::size_t>(c) * h * w * 8;
    if (buf.size() != need) throw IoError("truncated CGIM image: " + path);
    std::vector<double> data(static_cast<std::size_t>(c) * h * w);
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[10 + i * 8 + b]))
                    << (8 * b);
        }
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        data[i] = v;
    }
    return Tensor::from_vector({c, h, w}, std::move(data));
}

void write_dataset(const std::string& dir, const Dataset& dataset) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    std::string manifest;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const Sample& s = dataset.samples[i];
        char rel[64];
        std::snprintf(rel, sizeof(rel), "images/img_%06zu.cgim", i);
        write_image_cgim((fs::path(dir) / rel).string(), s.image);
        manifest += std::to_string(s.identity);
        manifest += '\t';
        manifest += rel;
        manifest += '\t';
        for (std::size_t k = 0; k < s.captions.size(); ++k) {
            if (k) manifest += '|';
            manifest += s.captions[k];
        }
        manifest += '\n';
    }
    std::string tmp = (fs::path(dir) / "manifest.tsv.tmp").string();
    std::string final_path = (fs::path(dir) / "manifest.tsv").string();
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write manifest to " + tmp);
        out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    }
    if (std::rename(tmp.c_str(), final_path.c_str()) != 0) {
        throw IoError("cannot rename manifest into place");
    }
}

Dataset load_dataset(const std::string& dir, const DataConfig& cfg) {
    namespace fs = std::filesystem;
    std::ifstream in((fs::path(dir) / "manifest.tsv").string());
    if (!in) throw IoError("cannot open manifest in " + dir);
    Dataset ds;
    std::string line;
    std::set<int> identities;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t t1 = line.find('\t');
        std::size_t t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) {
            throw IoError("malformed manifest line: " + line);
        }
        Sample s;
        s.identity = std::stoi(line.substr(0, t1));
        identities.insert(s.identity);
        std::string rel = line.substr(t1 + 1, t2 - t1 - 1);
        s.image = read_image_cgim((fs::path(dir) / rel).string());
        std::string caps = line.substr(t2 + 1);
        std::size_t start = 0;
        while (start <= caps.size()) {
            std::size_t bar = caps.find('|', start);
            if (bar == std::string::npos) {
                s.captions.push_back(caps.substr(start));
                break;
            }
            s.captions.push_back(caps.substr(start, bar - start));
            start = bar + 1;
        }
        ds.samples.push_back(std::move(s));
    }
    ds.n_identities = static_cast<int>(identities.size());
    if (ds.n_identities != cfg.n_identities ||
        static_cast<int>(ds.samples.size()) != cfg.n_identities * cfg.images_per_identity) {
        throw ConfigError("manifest does not match data configuration (" +
                          std::to_string(ds.samples.size()) + " samples, " +
                          std::to_string(ds.n_identities) + " identities)");
    }
    compute_splits(ds, cfg);
    return ds;
}

}  // namespace cgfr
