"""Data models for archives, anchors, channel bags and run manifests."""

from datetime import datetime, timezone
from typing import Dict, List, Literal, Optional

from dateutil import parser as date_parser
from pydantic import BaseModel, Field, field_validator, model_validator


def parse_timestamp(value) -> datetime:
    """Parse an ISO-8601 string (or datetime) into an aware UTC datetime."""
    if isinstance(value, datetime):
        parsed = value
    else:
        parsed = date_parser.isoparse(str(value))
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc)


class Counterpart(BaseModel):
    """The retweeted, quoted or replied-to user and tweet."""

    user_id: str = Field(..., description="Counterpart user id")
    bio: str = Field("", description="Counterpart user description")
    text: str = Field("", description="Counterpart tweet text")
    urls: List[str] = Field(default_factory=list, description="URLs in the counterpart tweet")
    mentions: List[str] = Field(default_factory=list, description="Mentions in the counterpart tweet")
    hashtags: List[str] = Field(default_factory=list, description="Hashtags in the counterpart tweet")


class RawTweet(BaseModel):
    """A single archived tweet."""

    text: str = Field("", description="Tweet text")
    created_at: datetime = Field(..., description="Creation time (UTC)")
    kind: Literal["original", "retweet", "reply", "quote"] = Field("original", description="Tweet kind")
    urls: List[str] = Field(default_factory=list, description="Expanded URLs")
    mentions: List[str] = Field(default_factory=list, description="Mentioned handles or ids")
    hashtags: List[str] = Field(default_factory=list, description="Hashtags; extracted from text when empty")
    counterpart: Optional[Counterpart] = Field(None, description="Counterpart for retweets/replies/quotes")

    @field_validator("created_at", mode="before")
    @classmethod
    def _parse_created_at(cls, value):
        return parse_timestamp(value)

    @model_validator(mode="after")
    def _check_counterpart(self):
        if self.kind != "original" and self.counterpart is None:
            raise ValueError(f"kind={self.kind} requires a counterpart")
        return self


class RawUserRecord(BaseModel):
    """One archived user: profile, neighbourhood ids and tweets."""

    user_id: str = Field(..., min_length=1, description="User id")
    bio: str = Field("", description="User description")
    follower_ids: List[str] = Field(default_factory=list, description="Follower ids")
    friend_ids: List[str] = Field(default_factory=list, description="Friend ids")
    tweets: List[RawTweet] = Field(default_factory=list, description="Archived tweets")
    label: Optional[int] = Field(None, ge=0, description="Optional gold class index")
    meta: Dict[str, str] = Field(default_factory=dict, description="Grouping attributes (state, community, ...)")


class TimeWindow(BaseModel):
    """Tweet time filter.

    With one bound the window is a half-line (created_at < before, or
    created_at >= after). With both bounds the window is the union of the two
    tails, which must not overlap, so after < before is rejected.
    """

    before: Optional[datetime] = None
    after: Optional[datetime] = None

    @field_validator("before", "after", mode="before")
    @classmethod
    def _parse_bound(cls, value):
        return None if value is None else parse_timestamp(value)

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.before is not None and self.after is not None and self.after < self.before:
            raise ValueError("after < before is rejected: the two tails would overlap")
        return self

    @property
    def unbounded(self) -> bool:
        return self.before is None and self.after is None

    def contains(self, moment: datetime) -> bool:
        if self.unbounded:
            return True
        if self.before is not None and moment < self.before:
            return True
        if self.after is not None and moment >= self.after:
            return True
        return False


class PartyAnchor(BaseModel):
    """Follower and retweeter lists of one party account, most recent first."""

    party: str = Field(..., min_length=1, description="Party name")
    follower_ids: List[str] = Field(default_factory=list, description="Followers, most recent first")
    retweeter_ids: List[str] = Field(default_factory=list, description="Retweeters, most recent first")


class BagRecord(BaseModel):
    """One line of a channel-bags file: sparse tokens and dense vectors keyed by channel name."""

    user_id: str = Field(..., min_length=1)
    label: Optional[int] = Field(None, ge=0)
    meta: Dict[str, str] = Field(default_factory=dict)
    bags: Dict[str, List[str]] = Field(default_factory=dict)
    dense: Dict[str, List[float]] = Field(default_factory=dict)


class RunManifest(BaseModel):
    """Provenance record written next to every CLI output."""

    version: int = 1
    command: str
    config: Dict[str, object] = Field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = Field(default_factory=dict, description="input path -> sha256")
    outputs: Dict[str, Optional[str]] = Field(default_factory=dict, description="output path -> sha256 once written")
    status: Literal["running", "complete", "failed"] = "running"
    started_at: str
    finished_at: Optional[str] = None
