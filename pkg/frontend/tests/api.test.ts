import { describe, expect, it, vi } from "vitest";

import { ApiClient, ApiError, listQuery } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

describe("listQuery", () => {
  it("includes only set filters plus paging", () => {
    expect(listQuery({})).toBe("page=1&page_size=24");
    expect(listQuery({ status: "flagged", classIndex: 0, page: 2, pageSize: 10 })).toBe(
      "status=flagged&class=0&page=2&page_size=10",
    );
  });
});

describe("ApiClient", () => {
  it("fetches and parses instance pages", async () => {
    const fetchImpl = vi.fn(async (url: string) => {
      expect(url).toBe("/api/instances?status=flagged&page=1&page_size=24");
      return jsonResponse({ items: [], total: 0, page: 1, page_size: 24 });
    });
    const client = new ApiClient("", fetchImpl);
    const page = await client.instances({ status: "flagged" });
    expect(page.total).toBe(0);
  });

  it("posts review decisions with a JSON body", async () => {
    const fetchImpl = vi.fn(async (url: string, init?: RequestInit) => {
      expect(url).toBe("/api/instances/c0_test_0001/review");
      expect(init?.method).toBe("POST");
      expect(JSON.parse(String(init?.body))).toEqual({ decision: "confirm", note: "bg" });
      return jsonResponse({ record: { instance_id: "c0_test_0001" }, auto_flagged: ["a", "b"] });
    });
    const client = new ApiClient("", fetchImpl);
    const response = await client.review("c0_test_0001", "confirm", "bg");
    expect(response.auto_flagged).toEqual(["a", "b"]);
  });

  it("sends null note when the note is empty", async () => {
    const fetchImpl = vi.fn(async (_url: string, init?: RequestInit) => {
      expect(JSON.parse(String(init?.body)).note).toBeNull();
      return jsonResponse({ record: {}, auto_flagged: [] });
    });
    await new ApiClient("", fetchImpl).review("x", "reject", "");
    expect(fetchImpl).toHaveBeenCalledOnce();
  });

  it("maps 409 responses to conflict errors with the server detail", async () => {
    const fetchImpl = async () => jsonResponse({ detail: "already confirmed" }, 409);
    const client = new ApiClient("", fetchImpl);
    const error = await client.review("x", "confirm").catch((e: unknown) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).isConflict).toBe(true);
    expect((error as ApiError).detail).toBe("already confirmed");
  });

  it("maps 404 responses to non-conflict errors", async () => {
    const fetchImpl = async () => jsonResponse({ detail: "unknown instance" }, 404);
    const error = await new ApiClient("", fetchImpl).instance("nope").catch((e: unknown) => e);
    expect((error as ApiError).status).toBe(404);
    expect((error as ApiError).isConflict).toBe(false);
  });

  it("reports health false when the service is unreachable", async () => {
    const fetchImpl = async () => {
      throw new TypeError("fetch failed");
    };
    expect(await new ApiClient("", fetchImpl).health()).toBe(false);
  });

  it("url-encodes instance ids", async () => {
    const fetchImpl = vi.fn(async (url: string) => {
      expect(url).toBe("/api/instances/a%20b%2Fc");
      return jsonResponse({ instance_id: "a b/c" });
    });
    await new ApiClient("", fetchImpl).instance("a b/c");
    expect(fetchImpl).toHaveBeenCalledOnce();
  });
});
