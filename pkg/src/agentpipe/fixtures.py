"""Bundled demo workload: an e-commerce session, stub functions, and a
synthetic benchmark pipeline.

Everything here is deterministic and offline. The stub functions stand in
for enterprise services (search index, inventory, cart, promotions, tax);
latency injection goes through the run's clock so virtual-clock runs stay
reproducible while real-clock runs actually wait.

The session workflow is three turns over a shared conversation: the first
turn's parsed intent arrives as pipeline inputs and fans out over
search/inventory/ranking stages (a parallel-safe forEach); the cart and
coupon turns run as sub-pipelines driving a scripted LLM through the tool
loop. The root pipeline has exactly six top-level steps.
"""

from __future__ import annotations

from .errors import EngineError
from .executor import FunctionBinding, Registries
from .ir import (
    AddMessage,
    AddResponse,
    AddTool,
    ForEach,
    FunctionCall,
    GetMapValue,
    Literal,
    Marshal,
    Not,
    PassVariables,
    PathExists,
    Pipeline,
    RunPipeline,
    SetValue,
    Template,
    ToolRequest,
    VarEquals,
    VarRef,
    When,
)
from .orchestration import LLMBinding, LLMConfig, MockLLMClient, MockScript, MockTurn, ToolCall, ToolParam, ToolSpec

CATALOG = [
    {"id": "P1", "name": "VoltEdge 14", "category": "gaming laptop", "price": 899.99, "rating": 4.1},
    {"id": "P2", "name": "ThunderBook 15", "category": "gaming laptop", "price": 949.5, "rating": 4.6},
    {"id": "P3", "name": "NimbusPro 16", "category": "gaming laptop", "price": 1299.0, "rating": 4.8},
    {"id": "P4", "name": "OfficeMate 13", "category": "ultrabook", "price": 649.0, "rating": 4.0},
]

INVENTORY = {"P1": 12, "P2": 5, "P3": 2, "P4": 40}

PROMOTIONS = [
    {"code": "SAVE10", "type": "percent", "value": 10, "minTotal": 500},
    {"code": "FREESHIP", "type": "shipping", "value": 0, "minTotal": 100},
]

TAX_RATES = {"CA": 0.0725, "NY": 0.08875, "TX": 0.0625}
DEFAULT_TAX_RATE = 0.05


def _matches(product: dict, query: str) -> bool:
    haystack = f"{product['name']} {product['category']}".lower()
    return all(token in haystack for token in query.lower().split())


def make_demo_functions(stage_latency_ms: float = 0.0) -> list[FunctionBinding]:
    """Fresh stub bindings; the cart closure is per-call-of-this-factory."""
    cart: list[dict] = []

    def run_search_stage(args, ctx):
        task, query, max_price = args
        if stage_latency_ms:
            ctx.sleep_ms(stage_latency_ms)
        if task == "search":
            items = [p for p in CATALOG if _matches(p, query) and p["price"] <= max_price]
            ctx.add_response("StageResult", {"stage": "search", "items": items})
        elif task == "inventory":
            ctx.add_response("StageResult", {"stage": "inventory", "stock": dict(INVENTORY)})
        elif task == "ranking":
            ctx.add_response("StageResult",
                             {"stage": "ranking", "weights": {"price": 0.4, "rating": 0.6}})
        else:
            raise EngineError("BAD_ARGUMENT", f"unknown analysis stage {task!r}")

    def stage_work(args, ctx):
        if stage_latency_ms:
            ctx.sleep_ms(stage_latency_ms)
        ctx.add_response("StageResult", {"stage": args[0]})

    def elastic_search(args, ctx):
        query = args[0]
        ctx.set("results", [p for p in CATALOG if _matches(p, query)])

    def lookup_product(args, ctx):
        product_id = args[0]
        found = next((p for p in CATALOG if p["id"] == product_id), None)
        ctx.set("product", dict(found) if found else None)

    def cart_add(args, ctx):
        product = args[0]
        cart.append(product)
        total = sum(p["price"] for p in cart)
        ctx.set("cart", [dict(p) for p in cart])
        ctx.set("cartTotal", total)
        ctx.add_response("CartUpdate", {
            "productId": product["id"], "name": product["name"], "cartTotal": total})

    def find_promotions(args, ctx):
        total = sum(p["price"] for p in cart)
        ctx.set("promotions", [p for p in PROMOTIONS if total >= p["minTotal"]])

    def apply_promotion(args, ctx):
        code = args[0]
        promo = next((p for p in PROMOTIONS if p["code"] == code), None)
        if promo is None:
            raise EngineError("BAD_ARGUMENT", f"unknown promotion {code!r}")
        total = sum(p["price"] for p in cart)
        new_total = total * (1 - promo["value"] / 100) if promo["type"] == "percent" else total
        ctx.add_response("DiscountApplied", {"code": code, "newTotal": new_total})

    def calculate_tax(args, ctx):
        price, region = args
        tax = price * TAX_RATES.get(region, DEFAULT_TAX_RATE)
        ctx.set("tax", tax)
        ctx.add_response("TaxCalculation", {"amount": tax})

    def apply_discount(args, ctx):
        total, rate = args
        ctx.set("discounted", total * (1 - rate))

    def echo(args, ctx):
        ctx.set("result", args[0])

    return [
        FunctionBinding("runSearchStage", 3, run_search_stage, pure=True),
        FunctionBinding("stageWork", 1, stage_work, pure=True),
        FunctionBinding("elasticSearch", 1, elastic_search, pure=True),
        FunctionBinding("lookupProduct", 1, lookup_product, pure=True),
        FunctionBinding("cartAdd", 1, cart_add, pure=False),
        FunctionBinding("findPromotions", 0, find_promotions, pure=False),
        FunctionBinding("applyPromotion", 1, apply_promotion, pure=False),
        FunctionBinding("calculateTax", 2, calculate_tax, pure=True),
        FunctionBinding("applyDiscount", 2, apply_discount, pure=True),
        FunctionBinding("echo", 1, echo, pure=True),
    ]


# --------------------------------------------------------------------------
# Tools

def demo_tools() -> list[ToolSpec]:
    search_products = ToolSpec(
        name="searchProducts",
        description="Search for products by query",
        parameters=(ToolParam("query", "string", required=True),),
        pipeline=Pipeline(name="searchProducts_impl", version="1", steps=(
            FunctionCall("elasticSearch", (VarRef("query"),)),
            Marshal("results", "formatted"),
            AddResponse("ProductList", Template("${formatted}")),
        )),
    )
    add_to_cart = ToolSpec(
        name="addToCart",
        description="Add a product to the shopping cart by product id",
        parameters=(ToolParam("productId", "string", required=True),),
        pipeline=Pipeline(name="addToCart_impl", version="1", steps=(
            FunctionCall("lookupProduct", (VarRef("productId"),)),
            When(
                cond=Not(VarEquals("product", None)),
                then_body=Pipeline(steps=(FunctionCall("cartAdd", (VarRef("product"),)),)),
                else_body=Pipeline(steps=(
                    AddResponse("ToolError", Template("Product ${productId} not found")),)),
            ),
        )),
    )
    apply_coupons = ToolSpec(
        name="applyCoupons",
        description="Find and apply the best available coupon to the cart",
        parameters=(),
        pipeline=Pipeline(name="applyCoupons_impl", version="1", steps=(
            FunctionCall("findPromotions", ()),
            When(
                cond=PathExists("promotions", (0,)),
                then_body=Pipeline(steps=(
                    FunctionCall("applyPromotion", (VarRef("promotions[0].code"),)),)),
                else_body=Pipeline(steps=(
                    AddResponse("CouponResult", Literal({"applied": False})),)),
            ),
        )),
    )
    return [search_products, add_to_cart, apply_coupons]


# --------------------------------------------------------------------------
# Case-study session

def case_study_pipelines() -> dict[str, Pipeline]:
    session = Pipeline(name="shopping_session", version="1", steps=(
        PassVariables(("query", "maxPrice", "analysisTasks")),
        ForEach("analysisTasks", "task", Pipeline(steps=(
            FunctionCall("runSearchStage", (VarRef("task"), VarRef("query"),
                                            VarRef("maxPrice"))),
        ))),
        AddTool(("addToCart", "applyCoupons")),
        RunPipeline("cart_turn", ()),
        RunPipeline("coupon_turn", ()),
        AddResponse("SessionSummary",
                    Template("Handled search, cart, and coupons for ${query}")),
    ))
    cart_turn = Pipeline(name="cart_turn", version="1", steps=(
        AddMessage("user", Literal("Add the second one to cart")),
        ToolRequest("assistant"),
    ))
    coupon_turn = Pipeline(name="coupon_turn", version="1", steps=(
        AddMessage("user", Literal("Apply any available coupons")),
        ToolRequest("assistant"),
    ))
    return {"shopping_session": session, "cart_turn": cart_turn, "coupon_turn": coupon_turn}


def case_study_inputs() -> dict:
    return {
        "query": "gaming laptop",
        "maxPrice": 1000,
        "analysisTasks": ["search", "inventory", "ranking"],
    }


def case_study_script() -> MockScript:
    return MockScript(turns=(
        MockTurn(expect="second",
                 tool_calls=(ToolCall("c1", "addToCart", "{\"productId\": \"P2\"}"),)),
        MockTurn(text="Added ThunderBook 15 to your cart. Cart total: $949.50."),
        MockTurn(expect="coupon", tool_calls=(ToolCall("c2", "applyCoupons", "{}"),)),
        MockTurn(text="Applied coupon SAVE10. New total: $854.55."),
    ))


def case_study_registries(stage_latency_ms: float = 0.0, clock=None,
                          llm_latency_ms: float = 0.0) -> Registries:
    pipelines = case_study_pipelines()
    registries = Registries(pipelines=pipelines)
    for binding in make_demo_functions(stage_latency_ms=stage_latency_ms):
        registries.register_function(binding)
    for tool in demo_tools():
        registries.register_tool(tool)
    client = MockLLMClient(case_study_script(), clock=clock, latency_ms=llm_latency_ms)
    registries.register_llm(LLMBinding(client=client, config=LLMConfig(llm_id="assistant")))
    return registries


# --------------------------------------------------------------------------
# Synthetic pipelines

def bench_pipeline(n_steps: int = 50) -> Pipeline:
    """Flat pipeline of exactly ``n_steps`` data operations.

    Repeats an identical marshal step so cache-enabled runs record hits.
    """
    if n_steps < 1:
        raise EngineError("BAD_ARGUMENT", "n_steps must be >= 1")
    steps: list = [SetValue("seed", Literal({"a": 1, "b": [1, 2, 3], "c": {"d": 7}}))]
    i = 1
    while len(steps) < n_steps:
        kind = i % 3
        if kind == 1:
            steps.append(SetValue(f"v{i}", Template(f"${{seed.a + {i}}}")))
        elif kind == 2:
            steps.append(Marshal("seed", "snapshot"))
        else:
            steps.append(GetMapValue("seed", "c.d", f"g{i}"))
        i += 1
    return Pipeline(name="bench_flat", version="1", steps=tuple(steps))


def fanout_pipelines(task_count_var: str = "tasks") -> dict[str, Pipeline]:
    """Parallel forEach and its sequential twin, for A/B latency contrast."""
    def build(name: str, parallel: bool) -> Pipeline:
        return Pipeline(name=name, version="1", steps=(
            PassVariables((task_count_var,)),
            ForEach(task_count_var, "t", Pipeline(steps=(
                FunctionCall("stageWork", (VarRef("t"),)),
            )), parallel=parallel),
        ))
    return {
        "fanout_parallel": build("fanout_parallel", True),
        "fanout_sequential": build("fanout_sequential", False),
    }


def make_registries(pipelines: dict[str, Pipeline] | None = None,
                    script: MockScript | None = None,
                    llm_ids: list[str] | None = None,
                    stage_latency_ms: float = 0.0,
                    clock=None,
                    llm_latency_ms: float = 0.0) -> Registries:
    """Wire demo functions/tools plus one shared mock client for the ids."""
    registries = Registries(pipelines=pipelines or {})
    for binding in make_demo_functions(stage_latency_ms=stage_latency_ms):
        registries.register_function(binding)
    for tool in demo_tools():
        registries.register_tool(tool)
    if script is not None:
        client = MockLLMClient(script, clock=clock, latency_ms=llm_latency_ms)
        for llm_id in llm_ids or ["assistant"]:
            registries.register_llm(LLMBinding(client=client,
                                               config=LLMConfig(llm_id=llm_id)))
    return registries


def write_demo_dir(directory) -> list[str]:
    """Dump the bundled session pipelines, mock script, and inputs as files."""
    import json
    from pathlib import Path

    from .ir import serialize_ir

    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    written = []
    for name, pipeline in {**case_study_pipelines(), **fanout_pipelines(),
                           "bench_flat": bench_pipeline(50)}.items():
        path = target / f"{name}.pipeline.json"
        path.write_text(serialize_ir(pipeline), encoding="utf-8")
        written.append(path.name)
    turns = []
    for turn in case_study_script().turns:
        emit: dict = {}
        if turn.text is not None:
            emit["text"] = turn.text
        elif turn.tool_calls is not None:
            emit["toolCalls"] = [tc.to_jsonable() for tc in turn.tool_calls]
        entry: dict = {"emit": emit}
        if turn.expect is not None:
            entry["expect"] = turn.expect
        turns.append(entry)
    (target / "session_script.json").write_text(json.dumps({"turns": turns}, indent=1),
                                                encoding="utf-8")
    written.append("session_script.json")
    (target / "session_vars.json").write_text(json.dumps(case_study_inputs(), indent=1),
                                              encoding="utf-8")
    written.append("session_vars.json")
    return written


if __name__ == "__main__":
    import sys

    out = sys.argv[1] if len(sys.argv) > 1 else "demo"
    for name in write_demo_dir(out):
        print(name)
